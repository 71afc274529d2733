// SPDX-License-Identifier: Apache-2.0
/**
 * @file   trainer.hpp
 * @brief  Training loop, evaluation, metrics stream and run manifest.
 *
 * A run directory holds:
 *   config.txt     the exact config of the run
 *   metrics.jsonl  one object per split per epoch:
 *                  {step, epoch, split, loss, accuracy, wall_ms, ...}
 *   last.swck      parameters + optimizer state after the latest epoch
 *   best.swck      parameters at the best test accuracy so far
 *   manifest.json  written at the end of the run
 * Shuffling, dropout and data all derive from seeds in the config, so a run
 * (or a resumed run) is reproduced exactly from config.txt.
 */
#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>

#include "sw/models/model.hpp"
#include "sw/tasks/tasks.hpp"
#include "sw/train/checkpoint.hpp"

namespace sw {

struct EvalResult {
  double loss = 0.0;
  std::size_t correct = 0, total = 0;
  std::size_t rel_correct = 0, rel_total = 0;  // Sort-of-CLEVR only
  std::vector<std::uint8_t> per_sample;        // 1 if correct; copy task: fully correct sequence

  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
  double relational_accuracy() const { return rel_total ? double(rel_correct) / double(rel_total) : 0.0; }
  double nonrelational_accuracy() const {
    const std::size_t n = total - rel_total;
    return n ? double(correct - rel_correct) / double(n) : 0.0;
  }
};

namespace detail {

/// Correct predictions among scored rows of one batch.
inline std::size_t count_correct(const std::vector<int>& pred, const std::vector<int>& labels, std::size_t& scored) {
  std::size_t c = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) continue;
    ++scored;
    c += pred[i] == labels[i];
  }
  return c;
}

inline std::string iso_time() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

inline void write_atomic(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw IoError("cannot write " + tmp);
    f << text;
    if (!f) throw IoError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

/// Accuracy and mean loss over the first `limit` samples (0 = all). For the
/// copy task accuracy is per scored token.
template <class T>
EvalResult evaluate(const HostModel<T>& model, const Dataset& data, std::size_t batch, std::size_t limit = 0) {
  const ModelConfig& c = model.config();
  tasks::check_dataset(data, c);
  NoGradGuard ng;
  EvalResult r;
  const std::size_t n = limit ? std::min(limit, tasks::sample_count(data)) : tasks::sample_count(data);
  double loss_sum = 0.0;
  std::size_t loss_rows = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < n; start += batch) {
    idx.resize(std::min(batch, n - start));
    std::iota(idx.begin(), idx.end(), start);
    const Batch<T> b = tasks::make_batch<T>(data, c, idx);
    const Tensor<T> logits = model.forward(b);
    std::size_t scored = 0;
    const auto pred = ops::argmax_rows(logits);
    r.correct += detail::count_correct(pred, b.labels, scored);
    loss_sum += static_cast<double>(ops::cross_entropy(logits, b.labels).item()) * static_cast<double>(scored);
    loss_rows += scored;
    r.total += scored;
    const std::size_t per = b.labels.size() / idx.size();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      bool ok = true;
      for (std::size_t j = i * per; j < (i + 1) * per; ++j) ok = ok && (b.labels[j] < 0 || pred[j] == b.labels[j]);
      r.per_sample.push_back(ok);
      if (c.task == TaskKind::kSortOfClevr && tasks::is_relational(data, idx[i])) {
        ++r.rel_total;
        r.rel_correct += ok;
      }
    }
  }
  r.loss = loss_rows ? loss_sum / static_cast<double>(loss_rows) : 0.0;
  return r;
}

struct TrainOptions {
  std::string run_dir;
  bool resume = false;
  /// Stop after this many total epochs (0 = cfg.epochs); the schedule still
  /// spans cfg.epochs so a later resume continues the same run.
  std::size_t stop_after = 0;
  std::string build_id = "unknown";
  nlohmann::json notes = nlohmann::json::object();  // copied into the manifest
  std::function<void(const nlohmann::json&)> on_epoch;
};

struct TrainReport {
  std::size_t epochs_done = 0;
  std::size_t best_epoch = 0;
  double best_accuracy = -1.0;
  nlohmann::json last_test;
};

/// Train dataset = records_for_samples(n_train) records from data_seed; test
/// uses a seed derived from data_seed so the two never share samples.
inline std::uint64_t test_data_seed(const ModelConfig& c) { return derive_seed(c.data_seed, 0x74657374); }

inline Dataset make_train_data(const ModelConfig& c) {
  return tasks::generate_for(c, tasks::records_for_samples(c, c.n_train), c.data_seed);
}
inline Dataset make_test_data(const ModelConfig& c) {
  return tasks::generate_for(c, tasks::records_for_samples(c, c.n_test), test_data_seed(c));
}

/// Runs (or resumes) training in opt.run_dir. Throws NumericError on a
/// non-finite loss or gradient; the last completed epoch's checkpoint stays.
inline TrainReport train(const ModelConfig& cfg, const Dataset& train_data, const Dataset& test_data, const TrainOptions& opt) {
  using T = float;
  cfg.validate();
  tasks::check_task_binding(cfg);
  tasks::check_dataset(train_data, cfg);
  tasks::check_dataset(test_data, cfg);
  namespace fs = std::filesystem;
  const fs::path dir(opt.run_dir);
  fs::create_directories(dir);
  const auto started = detail::iso_time();

  auto model = make_model<T>(cfg, cfg.seed);
  ParamList<T> params = model->parameters();
  AdamOptions ao;
  ao.weight_decay = cfg.weight_decay;
  AdamState<T> adam(ao);
  adam.init(params);

  TrainReport rep;
  std::size_t step = 0;
  const fs::path metrics_path = dir / "metrics.jsonl", last_path = dir / "last.swck", best_path = dir / "best.swck";
  if (opt.resume && fs::exists(last_path)) {
    const Checkpoint ck = load_checkpoint(last_path.string());
    if (ck.config_text != to_text(cfg)) throw ConfigError("resume: config differs from the checkpoint's config");
    restore(ck, params, &adam);
    rep.epochs_done = ck.state.at("epoch").get<std::size_t>();
    step = ck.state.at("step").get<std::size_t>();
    rep.best_epoch = ck.state.at("best_epoch").get<std::size_t>();
    rep.best_accuracy = ck.state.at("best_accuracy").get<double>();
    // Drop metrics written after the checkpoint (an interrupted epoch).
    std::ifstream in(metrics_path);
    std::string line, kept;
    while (std::getline(in, line))
      if (!line.empty() && nlohmann::json::parse(line).at("epoch").get<std::size_t>() <= rep.epochs_done) kept += line + "\n";
    detail::write_atomic(metrics_path, kept);
  } else {
    fs::remove(metrics_path);
    fs::remove(last_path);
    fs::remove(best_path);
  }
  detail::write_atomic(dir / "config.txt", to_text(cfg));

  std::ofstream metrics(metrics_path, std::ios::app);
  if (!metrics) throw IoError("cannot open " + metrics_path.string());
  auto emit = [&](const nlohmann::json& j) {
    metrics << j.dump() << "\n";
    metrics.flush();
  };

  const std::size_t n_samples = std::min(cfg.n_train, tasks::sample_count(train_data));
  const std::size_t last_epoch = opt.stop_after ? std::min(opt.stop_after, cfg.epochs) : cfg.epochs;
  std::vector<std::size_t> order(n_samples);
  for (std::size_t epoch = rep.epochs_done + 1; epoch <= last_epoch; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), 0);
    Rng(derive_seed(cfg.seed, 0x73687566ULL + epoch)).shuffle(order.begin(), order.end());
    const double lr = cosine_lr(cfg.lr, cfg.min_lr, epoch - 1, cfg.epochs);
    double loss_sum = 0.0;
    std::size_t correct = 0, scored = 0;
    for (std::size_t start = 0; start < n_samples; start += cfg.batch) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch, n_samples - start));
      const Batch<T> b = tasks::make_batch<T>(train_data, cfg, idx);
      Rng drop(derive_seed(cfg.seed ^ 0x64726f70ULL, step));
      RunContext<T> ctx;
      ctx.dropout = cfg.dropout;
      ctx.rng = &drop;
      for (auto& p : params) p.tensor.zero_grad();
      const Tensor<T> logits = model->forward(b, ctx);
      const Tensor<T> loss = ops::cross_entropy(logits, b.labels);
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " step " + std::to_string(step));
      loss.backward();
      adam_step(adam, params, lr);
      ++step;
      std::size_t s = 0;
      correct += detail::count_correct(ops::argmax_rows(logits), b.labels, s);
      scored += s;
      loss_sum += lv * static_cast<double>(s);
    }
    const double train_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    emit({{"step", step}, {"epoch", epoch}, {"split", "train"}, {"loss", scored ? loss_sum / double(scored) : 0.0},
          {"accuracy", scored ? double(correct) / double(scored) : 0.0}, {"lr", lr}, {"wall_ms", train_ms}});

    const auto t1 = std::chrono::steady_clock::now();
    const EvalResult ev = evaluate(*model, test_data, cfg.batch, cfg.n_test);
    nlohmann::json test = {{"step", step}, {"epoch", epoch}, {"split", "test"}, {"loss", ev.loss}, {"accuracy", ev.accuracy()}};
    if (cfg.task == TaskKind::kSortOfClevr) {
      test["accuracy_relational"] = ev.relational_accuracy();
      test["accuracy_nonrelational"] = ev.nonrelational_accuracy();
    }
    test["wall_ms"] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t1).count();
    emit(test);
    rep.last_test = test;

    if (ev.accuracy() > rep.best_accuracy) {
      rep.best_accuracy = ev.accuracy();
      rep.best_epoch = epoch;
      save_checkpoint(make_checkpoint<T>(cfg, params, nullptr, {{"epoch", epoch}, {"step", step}, {"test_accuracy", ev.accuracy()}}),
                      best_path.string());
    }
    rep.epochs_done = epoch;
    save_checkpoint(make_checkpoint<T>(cfg, params, &adam,
                                       {{"epoch", epoch}, {"step", step}, {"best_epoch", rep.best_epoch},
                                        {"best_accuracy", rep.best_accuracy}}),
                    last_path.string());
    if (opt.on_epoch) opt.on_epoch(test);
  }

  nlohmann::json manifest = {
      {"config", to_text(cfg)},
      {"build_id", opt.build_id},
      {"seed", cfg.seed},
      {"data_seed", cfg.data_seed},
      {"test_data_seed", test_data_seed(cfg)},
      {"datasets", {{"train", train_data.header()}, {"test", test_data.header()}}},
      {"started", started},
      {"finished", detail::iso_time()},
      {"epochs_done", rep.epochs_done},
      {"best_epoch", rep.best_epoch},
      {"best_test_accuracy", rep.best_accuracy},
      {"final_test", rep.last_test},
      {"artifacts",
       {{"config", (dir / "config.txt").string()},
        {"metrics", metrics_path.string()},
        {"last_checkpoint", last_path.string()},
        {"best_checkpoint", best_path.string()}}},
      {"notes", opt.notes},
  };
  detail::write_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
  return rep;
}

/// Model rebuilt from a checkpoint's own config, with its parameters.
template <class T>
std::unique_ptr<HostModel<T>> load_model(const Checkpoint& ck) {
  const ModelConfig cfg = parse_config(ck.config_text);
  auto m = make_model<T>(cfg, cfg.seed);
  ParamList<T> ps = m->parameters();
  restore(ck, ps);
  return m;
}

}  // namespace sw
