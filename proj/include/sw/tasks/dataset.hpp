// SPDX-License-Identifier: Apache-2.0
/**
 * @file   dataset.hpp
 * @brief  Self-describing binary dataset files.
 *
 * Layout (little-endian):
 *   "SWDS"  u32 version  u32 header_len  header (JSON, header_len bytes)
 *   n * record_size bytes of fixed-size records
 * The JSON header carries at least task, n, seed and record_size. Files are
 * written to a temporary name and renamed, and read back through mmap.
 */
#pragma once

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "sw/tensor.hpp"

namespace sw {

inline constexpr char kDatasetMagic[4] = {'S', 'W', 'D', 'S'};
inline constexpr std::uint32_t kDatasetVersion = 1;

/// Read-only view over a dataset: owns either an mmap or an in-memory buffer.
class Dataset {
 public:
  Dataset() = default;
  Dataset(nlohmann::json header, std::vector<std::uint8_t> records) : header_(std::move(header)), owned_(std::move(records)) {
    init_from_header();
    data_ = owned_.data();
    check_size(owned_.size());
  }

  static Dataset open(const std::string& path) {
    Dataset d;
    d.map_ = std::make_shared<Mapping>(path);
    const std::uint8_t* p = d.map_->data;
    const std::size_t size = d.map_->size;
    if (size < 12 || std::memcmp(p, kDatasetMagic, 4) != 0) throw IoError(path + ": not a dataset file");
    std::uint32_t version = 0, hlen = 0;
    std::memcpy(&version, p + 4, 4);
    std::memcpy(&hlen, p + 8, 4);
    if (version != kDatasetVersion)
      throw IoError(path + ": dataset version " + std::to_string(version) + " (expected " + std::to_string(kDatasetVersion) + ")");
    if (12 + static_cast<std::size_t>(hlen) > size) throw IoError(path + ": truncated header");
    try {
      d.header_ = nlohmann::json::parse(p + 12, p + 12 + hlen);
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path + ": bad header: " + e.what());
    }
    d.init_from_header();
    d.data_ = p + 12 + hlen;
    d.check_size(size - 12 - hlen);
    return d;
  }

  void save(const std::string& path) const {
    const std::string tmp = path + ".tmp";
    {
      std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
      if (!f) throw IoError("cannot write " + tmp);
      const std::string h = header_.dump();
      const std::uint32_t version = kDatasetVersion, hlen = static_cast<std::uint32_t>(h.size());
      f.write(kDatasetMagic, 4);
      f.write(reinterpret_cast<const char*>(&version), 4);
      f.write(reinterpret_cast<const char*>(&hlen), 4);
      f.write(h.data(), static_cast<std::streamsize>(h.size()));
      f.write(reinterpret_cast<const char*>(data_), static_cast<std::streamsize>(n_ * record_size_));
      if (!f) throw IoError("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
  }

  const nlohmann::json& header() const { return header_; }
  std::string task() const { return header_.at("task").get<std::string>(); }
  std::size_t size() const { return n_; }
  std::size_t record_size() const { return record_size_; }
  std::span<const std::uint8_t> record(std::size_t i) const {
    if (i >= n_) throw ConfigError("dataset record " + std::to_string(i) + " out of range " + std::to_string(n_));
    return {data_ + i * record_size_, record_size_};
  }
  std::span<const std::uint8_t> bytes() const { return {data_, n_ * record_size_}; }

 private:
  struct Mapping {
    const std::uint8_t* data = nullptr;
    std::size_t size = 0;
    explicit Mapping(const std::string& path) {
      const int fd = ::open(path.c_str(), O_RDONLY);
      if (fd < 0) throw IoError("cannot open dataset " + path);
      struct stat st {};
      if (::fstat(fd, &st) != 0) {
        ::close(fd);
        throw IoError("cannot stat " + path);
      }
      size = static_cast<std::size_t>(st.st_size);
      void* m = size ? ::mmap(nullptr, size, PROT_READ, MAP_PRIVATE, fd, 0) : nullptr;
      ::close(fd);
      if (m == MAP_FAILED) throw IoError("cannot map " + path);
      data = static_cast<const std::uint8_t*>(m);
    }
    ~Mapping() {
      if (data) ::munmap(const_cast<std::uint8_t*>(data), size);
    }
    Mapping(const Mapping&) = delete;
    Mapping& operator=(const Mapping&) = delete;
  };

  void init_from_header() {
    try {
      n_ = header_.at("n").get<std::size_t>();
      record_size_ = header_.at("record_size").get<std::size_t>();
      header_.at("task").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw IoError(std::string("dataset header incomplete: ") + e.what());
    }
  }
  void check_size(std::size_t available) const {
    if (available != n_ * record_size_)
      throw IoError("dataset holds " + std::to_string(available) + " record bytes, header implies " +
                    std::to_string(n_ * record_size_));
  }

  nlohmann::json header_;
  std::vector<std::uint8_t> owned_;
  std::shared_ptr<Mapping> map_;
  const std::uint8_t* data_ = nullptr;
  std::size_t n_ = 0, record_size_ = 0;
};

namespace detail {

inline void put_f32(std::uint8_t* p, float v) { std::memcpy(p, &v, 4); }
inline float get_f32(const std::uint8_t* p) {
  float v;
  std::memcpy(&v, p, 4);
  return v;
}

}  // namespace detail

}  // namespace sw
