// Copyright (c) 2026, The dllmq Authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container: a JSON manifest (<base>.manifest.json) indexing a
// single little-endian payload file (<base>.blob). The byte format is
// described in docs/container-format.md.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dllmq/calib.hpp"
#include "dllmq/model.hpp"
#include "dllmq/quant.hpp"

namespace dllmq {

enum class DType { kF32, kF64, kU8, kU16, kI32 };

std::string to_string(DType t);
DType dtype_from_string(const std::string& s);
std::size_t dtype_width(DType t);

/// One named payload. `bytes` is already little-endian.
struct StoredTensor {
  DType dtype = DType::kF32;
  std::vector<std::int64_t> shape;
  std::vector<std::uint8_t> bytes;

  bool operator==(const StoredTensor&) const = default;
};

class Container {
 public:
  static constexpr int kFormatVersion = 1;

  nlohmann::json metadata = nlohmann::json::object();

  /// Throws "duplicate_name" if the name is taken.
  void put(const std::string& name, StoredTensor t);
  void put_f32(const std::string& name, const MatrixF& m);
  void put_f64(const std::string& name, const MatrixD& m);
  void put_f64(const std::string& name, const VectorD& v);
  void put_i32(const std::string& name, const std::vector<std::int32_t>& v);
  /// Stores <name>.codes (u8 for bits <= 8, else u16), <name>.scales (f32)
  /// and <name>.zeros (i32); the spec and shape go to metadata["quantized"].
  void put_quantized(const std::string& name, const QuantizedTensor& q);

  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  const StoredTensor& at(const std::string& name) const;
  MatrixF get_f32(const std::string& name) const;
  MatrixD get_f64(const std::string& name) const;
  VectorD get_f64_vector(const std::string& name) const;
  std::vector<std::int32_t> get_i32(const std::string& name) const;
  QuantizedTensor get_quantized(const std::string& name) const;

  const std::map<std::string, StoredTensor>& tensors() const { return tensors_; }

  bool operator==(const Container&) const = default;

 private:
  std::map<std::string, StoredTensor> tensors_;
};

std::string manifest_path(const std::string& base);
std::string blob_path(const std::string& base);

/// Writes the blob, then the manifest, each through a temporary file and a
/// rename. The manifest records the blob checksum, so a blob left behind by
/// an interrupted save never loads against an older manifest.
void save(const std::string& base, const Container& c);

/// Validates version, index and checksum before returning. Errors:
/// "unsupported_version", "corrupt_container", "truncated_blob", "io_error".
Container load(const std::string& base);

/// FNV-1a 64-bit.
std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(const std::string& s);
std::string hex64(std::uint64_t v);

/// Writes text through a temporary file and a rename.
void write_file_atomic(const std::string& path, const std::string& content);
std::string read_file(const std::string& path);

nlohmann::json to_json(const QuantSpec& s);
QuantSpec quant_spec_from_json(const nlohmann::json& j);

/// Parameters, site ops and state quantizers of a model.
Container model_to_container(const Model<float>& m);
Model<float> model_from_container(const Container& c);
void save_model(const std::string& base, const Model<float>& m, const nlohmann::json& extra = {});
Model<float> load_model(const std::string& base);

/// Token sequences as one i32 [count x length] tensor "tokens"; source and
/// extents go to metadata.
Container calib_to_container(const CalibSet& c);
CalibSet calib_from_container(const Container& c);
void save_calib(const std::string& base, const CalibSet& c, const nlohmann::json& extra = {});
CalibSet load_calib(const std::string& base);

}  // namespace dllmq
