// SPDX-License-Identifier: Apache-2.0
/**
 * @file   presets.hpp
 * @brief  Named configurations: toy dims for gradient checks, the smoke run,
 *         and the desk-scale experiment settings.
 */
#pragma once

#include "sw/models/config.hpp"

namespace sw {

/// 2 layers, n_h = 8, four patch specialists (+ CLS), n_m = 2, n_s = 4.
inline ModelConfig toy_config(Host host, TaskKind task = TaskKind::kTriangles) {
  ModelConfig c;
  c.host = host;
  c.apply_host_defaults();
  c.task = task;
  c.n_layers = 2;
  c.n_h = 8;
  c.ffn_dim = 12;
  c.heads = 2;
  c.head_dim = 4;
  c.dropout = 0.0;
  c.n_m = 2;
  c.sw_heads = 2;
  c.sw_key_dim = 3;
  c.n_s = 4;
  c.n_sel = 2;
  c.rims_input_dim = 5;
  c.rims_pos_dim = 3;
  c.rims_key_dim = 4;
  c.n_b = 2;
  c.tims_pre = 1;
  c.tims_post = 1;
  c.image_size = 8;
  c.patch = 4;
  c.channels = 1;
  c.n_classes = 3;
  c.vocab = 5;
  c.seq_len = 6;
  if (host == Host::kTrHsw) c.topk = 2;
  return c;
}

/// Triangles, 2 layers, n_h = 32, 500 training samples, 3 epochs.
inline ModelConfig smoke_config(Host host = Host::kTrHsw) {
  ModelConfig c;
  c.host = host;
  c.apply_host_defaults();
  c.task = TaskKind::kTriangles;
  c.n_layers = 2;
  c.n_h = 32;
  c.ffn_dim = 64;
  c.heads = 4;
  c.head_dim = 8;
  c.n_m = 4;
  c.sw_heads = 4;
  c.sw_key_dim = 8;
  if (host == Host::kTrHsw) c.topk = 16;
  c.n_train = 500;
  c.n_test = 200;
  c.batch = 32;
  c.epochs = 3;
  return c;
}

/// Triangles at desk scale: 32x32 images, 10k train / 2k test, 4 layers,
/// n_h = 64, 8 slots, 50 epochs.
inline ModelConfig triangles_desk_config(Host host) {
  ModelConfig c;
  c.host = host;
  c.apply_host_defaults();
  c.task = TaskKind::kTriangles;
  c.image_size = 32;
  c.patch = 4;
  c.n_layers = 4;
  c.n_h = 64;
  c.ffn_dim = 128;
  c.heads = 4;
  c.head_dim = 16;
  c.n_m = 8;
  c.sw_heads = 4;
  c.sw_key_dim = 8;
  if (host == Host::kTrHsw) c.topk = 20;
  c.n_train = 10000;
  c.n_test = 2000;
  c.batch = 64;
  c.epochs = 50;
  return c;
}

/// Sort-of-CLEVR at desk scale: 15x15 patches plus a question token.
inline ModelConfig soc_desk_config(Host host) {
  ModelConfig c;
  c.host = host;
  c.apply_host_defaults();
  c.task = TaskKind::kSortOfClevr;
  c.image_size = 75;
  c.channels = 3;
  c.patch = 15;
  c.question_bits = 11;
  c.n_classes = 10;
  c.n_layers = 4;
  c.n_h = 64;
  c.ffn_dim = 128;
  c.heads = 4;
  c.head_dim = 16;
  c.n_m = 8;
  c.sw_heads = 4;
  c.sw_key_dim = 8;
  if (host == Host::kTrHsw) c.topk = 8;
  c.n_train = 20000;
  c.n_test = 4000;
  c.batch = 64;
  c.epochs = 30;
  return c;
}

}  // namespace sw
