// Copyright (c) 2026, The dllmq Authors
// SPDX-License-Identifier: Apache-2.0

#include "dllmq/modelio.hpp"

#include <unistd.h>

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace dllmq {

namespace fs = std::filesystem;

std::string to_string(DType t) {
  switch (t) {
    case DType::kF32: return "f32";
    case DType::kF64: return "f64";
    case DType::kU8: return "u8";
    case DType::kU16: return "u16";
    case DType::kI32: return "i32";
  }
  return "?";
}

DType dtype_from_string(const std::string& s) {
  if (s == "f32") return DType::kF32;
  if (s == "f64") return DType::kF64;
  if (s == "u8") return DType::kU8;
  if (s == "u16") return DType::kU16;
  if (s == "i32") return DType::kI32;
  fail("corrupt_container", "unknown dtype '" + s + "'");
}

std::size_t dtype_width(DType t) {
  switch (t) {
    case DType::kF32: return 4;
    case DType::kF64: return 8;
    case DType::kU8: return 1;
    case DType::kU16: return 2;
    case DType::kI32: return 4;
  }
  return 0;
}

namespace {

constexpr std::size_t kAlign = 8;

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename U>
U get_le(const std::uint8_t* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(p[i]) << (8 * i));
  return v;
}

std::size_t element_count(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return static_cast<std::size_t>(n);
}

const StoredTensor& expect(const Container& c, const std::string& name, DType dtype) {
  const StoredTensor& t = c.at(name);
  require(t.dtype == dtype, "corrupt_container",
          "tensor '" + name + "' has dtype " + to_string(t.dtype) + ", expected " + to_string(dtype));
  return t;
}

std::pair<Eigen::Index, Eigen::Index> matrix_extent(const StoredTensor& t, const std::string& name) {
  if (t.shape.size() == 2) return {t.shape[0], t.shape[1]};
  if (t.shape.size() == 1) return {1, t.shape[0]};
  fail("corrupt_container", "tensor '" + name + "' is not rank 1 or 2");
}

}  // namespace

void Container::put(const std::string& name, StoredTensor t) {
  require(!name.empty(), "invalid_name", "tensor name is empty");
  require(tensors_.count(name) == 0, "duplicate_name", "tensor '" + name + "' already present");
  require(t.bytes.size() == element_count(t.shape) * dtype_width(t.dtype), "shape_mismatch",
          "tensor '" + name + "': payload size does not match shape");
  tensors_.emplace(name, std::move(t));
}

void Container::put_f32(const std::string& name, const MatrixF& m) {
  require(m.allFinite(), "non_finite", "tensor '" + name + "' has non-finite entries");
  StoredTensor t{DType::kF32, {m.rows(), m.cols()}, {}};
  t.bytes.reserve(static_cast<std::size_t>(m.size()) * 4);
  for (Eigen::Index i = 0; i < m.size(); ++i) put_le(t.bytes, std::bit_cast<std::uint32_t>(m.data()[i]));
  put(name, std::move(t));
}

void Container::put_f64(const std::string& name, const MatrixD& m) {
  require(m.allFinite(), "non_finite", "tensor '" + name + "' has non-finite entries");
  StoredTensor t{DType::kF64, {m.rows(), m.cols()}, {}};
  t.bytes.reserve(static_cast<std::size_t>(m.size()) * 8);
  for (Eigen::Index i = 0; i < m.size(); ++i) put_le(t.bytes, std::bit_cast<std::uint64_t>(m.data()[i]));
  put(name, std::move(t));
}

void Container::put_f64(const std::string& name, const VectorD& v) {
  require(v.allFinite(), "non_finite", "tensor '" + name + "' has non-finite entries");
  StoredTensor t{DType::kF64, {v.size()}, {}};
  for (Eigen::Index i = 0; i < v.size(); ++i) put_le(t.bytes, std::bit_cast<std::uint64_t>(v(i)));
  put(name, std::move(t));
}

void Container::put_i32(const std::string& name, const std::vector<std::int32_t>& v) {
  StoredTensor t{DType::kI32, {static_cast<std::int64_t>(v.size())}, {}};
  for (auto x : v) put_le(t.bytes, static_cast<std::uint32_t>(x));
  put(name, std::move(t));
}

void Container::put_quantized(const std::string& name, const QuantizedTensor& q) {
  validate(q);
  const bool narrow = q.spec.bits <= 8;
  StoredTensor codes{narrow ? DType::kU8 : DType::kU16, {static_cast<std::int64_t>(q.codes.size())}, {}};
  for (auto c : q.codes) {
    if (narrow)
      codes.bytes.push_back(static_cast<std::uint8_t>(c));
    else
      put_le(codes.bytes, c);
  }
  put(name + ".codes", std::move(codes));
  StoredTensor scales{DType::kF32, {static_cast<std::int64_t>(q.params.size())}, {}};
  std::vector<std::int32_t> zeros;
  for (const auto& p : q.params) {
    put_le(scales.bytes, std::bit_cast<std::uint32_t>(p.scale));
    zeros.push_back(p.zero_point);
  }
  put(name + ".scales", std::move(scales));
  put_i32(name + ".zeros", zeros);
  metadata["quantized"][name] = {{"spec", to_json(q.spec)}, {"shape", q.original_shape}};
}

const StoredTensor& Container::at(const std::string& name) const {
  const auto it = tensors_.find(name);
  require(it != tensors_.end(), "missing_tensor", "tensor '" + name + "' not in container");
  return it->second;
}

MatrixF Container::get_f32(const std::string& name) const {
  const auto& t = expect(*this, name, DType::kF32);
  const auto [r, c] = matrix_extent(t, name);
  MatrixF m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i)
    m.data()[i] = std::bit_cast<float>(get_le<std::uint32_t>(t.bytes.data() + 4 * i));
  return m;
}

MatrixD Container::get_f64(const std::string& name) const {
  const auto& t = expect(*this, name, DType::kF64);
  const auto [r, c] = matrix_extent(t, name);
  MatrixD m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i)
    m.data()[i] = std::bit_cast<double>(get_le<std::uint64_t>(t.bytes.data() + 8 * i));
  return m;
}

VectorD Container::get_f64_vector(const std::string& name) const {
  const MatrixD m = get_f64(name);
  require(m.rows() == 1, "corrupt_container", "tensor '" + name + "' is not a vector");
  return m.row(0).transpose();
}

std::vector<std::int32_t> Container::get_i32(const std::string& name) const {
  const auto& t = expect(*this, name, DType::kI32);
  std::vector<std::int32_t> v(t.bytes.size() / 4);
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = static_cast<std::int32_t>(get_le<std::uint32_t>(t.bytes.data() + 4 * i));
  return v;
}

QuantizedTensor Container::get_quantized(const std::string& name) const {
  require(metadata.contains("quantized") && metadata["quantized"].contains(name), "missing_tensor",
          "quantized tensor '" + name + "' not in container");
  const auto& info = metadata["quantized"][name];
  QuantizedTensor q;
  q.spec = quant_spec_from_json(info.at("spec"));
  q.original_shape = info.at("shape").get<std::vector<std::int64_t>>();
  const auto& codes = at(name + ".codes");
  if (codes.dtype == DType::kU8) {
    q.codes.assign(codes.bytes.begin(), codes.bytes.end());
  } else {
    require(codes.dtype == DType::kU16, "corrupt_container", "tensor '" + name + ".codes' has a non-code dtype");
    q.codes.resize(codes.bytes.size() / 2);
    for (std::size_t i = 0; i < q.codes.size(); ++i) q.codes[i] = get_le<std::uint16_t>(codes.bytes.data() + 2 * i);
  }
  const auto& scales = expect(*this, name + ".scales", DType::kF32);
  const auto zeros = get_i32(name + ".zeros");
  require(zeros.size() * 4 == scales.bytes.size(), "corrupt_container",
          "tensor '" + name + "': scale and zero-point counts differ");
  for (std::size_t i = 0; i < zeros.size(); ++i)
    q.params.push_back({std::bit_cast<float>(get_le<std::uint32_t>(scales.bytes.data() + 4 * i)), zeros[i]});
  validate(q);
  return q;
}

std::string manifest_path(const std::string& base) { return base + ".manifest.json"; }
std::string blob_path(const std::string& base) { return base + ".blob"; }

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t n, std::uint64_t h) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a64(const std::string& s) {
  return fnv1a64(reinterpret_cast<const std::uint8_t*>(s.data()), s.size());
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

namespace {

void write_bytes_atomic(const std::string& path, const char* data, std::size_t n) {
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const std::string tmp = path + ".tmp" + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), "io_error", "cannot open '" + tmp + "' for writing");
    out.write(data, static_cast<std::streamsize>(n));
    out.flush();
    require(static_cast<bool>(out), "io_error", "write to '" + tmp + "' failed");
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp);
    fail("io_error", "cannot rename '" + tmp + "' to '" + path + "': " + ec.message());
  }
}

}  // namespace

void write_file_atomic(const std::string& path, const std::string& content) {
  write_bytes_atomic(path, content.data(), content.size());
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "io_error", "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void save(const std::string& base, const Container& c) {
  std::vector<std::uint8_t> blob;
  nlohmann::json index = nlohmann::json::array();
  for (const auto& [name, t] : c.tensors()) {
    while (blob.size() % kAlign != 0) blob.push_back(0);
    index.push_back({{"name", name},
                     {"dtype", to_string(t.dtype)},
                     {"shape", t.shape},
                     {"offset", blob.size()},
                     {"length", t.bytes.size()}});
    blob.insert(blob.end(), t.bytes.begin(), t.bytes.end());
  }
  nlohmann::json manifest = {
      {"format", "dllmq-container"},
      {"version", Container::kFormatVersion},
      {"blob", {{"file", fs::path(blob_path(base)).filename().string()},
                {"bytes", blob.size()},
                {"fnv1a64", hex64(fnv1a64(blob.data(), blob.size()))}}},
      {"tensors", index},
      {"metadata", c.metadata},
  };
  write_bytes_atomic(blob_path(base), reinterpret_cast<const char*>(blob.data()), blob.size());
  write_file_atomic(manifest_path(base), manifest.dump(1) + "\n");
}

Container load(const std::string& base) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(manifest_path(base)));
  } catch (const nlohmann::json::exception& e) {
    fail("corrupt_container", manifest_path(base) + ": " + e.what());
  }
  try {
    require(manifest.value("format", "") == "dllmq-container", "corrupt_container",
            manifest_path(base) + ": not a dllmq container manifest");
    const int version = manifest.at("version").get<int>();
    require(version == Container::kFormatVersion, "unsupported_version",
            "container format version " + std::to_string(version) + " is not supported (expected " +
                std::to_string(Container::kFormatVersion) + ")");

    const std::string raw = read_file(blob_path(base));
    const auto& binfo = manifest.at("blob");
    const auto expected = binfo.at("bytes").get<std::uint64_t>();
    require(raw.size() >= expected, "truncated_blob",
            blob_path(base) + ": " + std::to_string(raw.size()) + " bytes, manifest expects " +
                std::to_string(expected));
    require(raw.size() == expected, "corrupt_container", blob_path(base) + ": trailing bytes after payload");
    const auto* bytes = reinterpret_cast<const std::uint8_t*>(raw.data());

    Container c;
    std::uint64_t prev_end = 0;
    for (const auto& e : manifest.at("tensors")) {
      const std::string name = e.at("name").get<std::string>();
      const DType dtype = dtype_from_string(e.at("dtype").get<std::string>());
      const auto shape = e.at("shape").get<std::vector<std::int64_t>>();
      const auto offset = e.at("offset").get<std::uint64_t>();
      const auto length = e.at("length").get<std::uint64_t>();
      for (auto d : shape) require(d >= 0, "corrupt_container", "tensor '" + name + "': negative extent");
      require(length == element_count(shape) * dtype_width(dtype), "corrupt_container",
              "tensor '" + name + "': byte length " + std::to_string(length) + " does not match shape and dtype");
      // Payloads are packed in index order at 8-byte alignment; any other
      // offset means the index was altered.
      const std::uint64_t canonical = (prev_end + kAlign - 1) / kAlign * kAlign;
      require(offset == canonical && offset + length <= expected, "corrupt_container",
              "tensor '" + name + "': offset " + std::to_string(offset) + " is " +
                  (offset + length > expected ? "out of bounds" : "not at the packed position " + std::to_string(canonical)));
      prev_end = offset + length;
      require(!c.contains(name), "corrupt_container", "tensor '" + name + "' listed twice");
      c.put(name, StoredTensor{dtype, shape, std::vector<std::uint8_t>(bytes + offset, bytes + offset + length)});
    }
    require(hex64(fnv1a64(bytes, raw.size())) == binfo.at("fnv1a64").get<std::string>(), "corrupt_container",
            blob_path(base) + ": checksum mismatch");
    c.metadata = manifest.at("metadata");
    return c;
  } catch (const nlohmann::json::exception& e) {
    fail("corrupt_container", manifest_path(base) + ": " + e.what());
  }
}

nlohmann::json to_json(const QuantSpec& s) {
  return {{"bits", s.bits},         {"symmetric", s.symmetric},   {"granularity", to_string(s.granularity)},
          {"axis", s.axis},         {"group_size", s.group_size}, {"clip_ratio", s.clip_ratio}};
}

QuantSpec quant_spec_from_json(const nlohmann::json& j) {
  QuantSpec s;
  s.bits = j.at("bits").get<int>();
  s.symmetric = j.at("symmetric").get<bool>();
  s.granularity = granularity_from_string(j.at("granularity").get<std::string>());
  s.axis = j.at("axis").get<int>();
  s.group_size = j.at("group_size").get<int>();
  s.clip_ratio = j.at("clip_ratio").get<double>();
  s.validate();
  return s;
}

namespace {

nlohmann::json optional_spec(const std::optional<QuantSpec>& s) { return s ? to_json(*s) : nlohmann::json(); }

std::optional<QuantSpec> optional_spec_from(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return quant_spec_from_json(j);
}

}  // namespace

Container model_to_container(const Model<float>& m) {
  Container c;
  m.params.visit([&](const std::string& n, const MatrixF& w) { c.put_f32("param/" + n, w); });
  nlohmann::json sites = nlohmann::json::object();
  for (const auto& [name, rt] : m.sites) {
    if (rt.empty()) continue;
    nlohmann::json ops = nlohmann::json::array();
    for (std::size_t i = 0; i < rt.ops.size(); ++i) {
      const std::string tensor = "site/" + name + "/" + std::to_string(i);
      if (rt.ops[i].kind == ActOp::Kind::kDivide) {
        c.put_f64(tensor, rt.ops[i].scale);
        ops.push_back({{"kind", "divide"}, {"tensor", tensor}});
      } else {
        c.put_f64(tensor, rt.ops[i].matrix);
        ops.push_back({{"kind", "matmul"}, {"tensor", tensor}});
      }
    }
    sites[name] = {{"ops", ops}, {"act_quant", optional_spec(rt.act_quant)}};
  }
  c.metadata["kind"] = "model";
  c.metadata["config"] = m.config.to_json();
  c.metadata["sites"] = sites;
  c.metadata["state_quant"] = {{"q", optional_spec(m.state_quant.q)},
                               {"k", optional_spec(m.state_quant.k)},
                               {"v", optional_spec(m.state_quant.v)}};
  return c;
}

Model<float> model_from_container(const Container& c) {
  require(c.metadata.value("kind", "") == "model", "corrupt_container", "container does not hold a model");
  Model<float> m;
  m.config = ModelConfig::from_json(c.metadata.at("config"));
  m.params = Params<float>::zeros_like(m.config);
  m.params.visit([&](const std::string& n, MatrixF& w) {
    MatrixF loaded = c.get_f32("param/" + n);
    require(loaded.rows() == w.rows() && loaded.cols() == w.cols(), "corrupt_container",
            "tensor 'param/" + n + "' has the wrong shape for the stored config");
    w = std::move(loaded);
  });
  for (const auto& [name, s] : c.metadata.at("sites").items()) {
    parse_site(name);
    SiteRuntime rt;
    for (const auto& op : s.at("ops")) {
      const std::string tensor = op.at("tensor").get<std::string>();
      if (op.at("kind") == "divide")
        rt.ops.push_back(ActOp::divide(c.get_f64_vector(tensor)));
      else
        rt.ops.push_back(ActOp::multiply(c.get_f64(tensor)));
    }
    rt.act_quant = optional_spec_from(s.at("act_quant"));
    m.sites[name] = std::move(rt);
  }
  const auto& sq = c.metadata.at("state_quant");
  m.state_quant.q = optional_spec_from(sq.at("q"));
  m.state_quant.k = optional_spec_from(sq.at("k"));
  m.state_quant.v = optional_spec_from(sq.at("v"));
  return m;
}

void save_model(const std::string& base, const Model<float>& m, const nlohmann::json& extra) {
  Container c = model_to_container(m);
  if (!extra.is_null())
    for (const auto& [k, v] : extra.items()) c.metadata[k] = v;
  save(base, c);
}

Model<float> load_model(const std::string& base) { return model_from_container(load(base)); }

Container calib_to_container(const CalibSet& c) {
  std::vector<std::int32_t> flat;
  for (const auto& seq : c.sequences) {
    require(static_cast<int>(seq.size()) == c.sequence_length, "invalid_calib", "ragged calibration sequence");
    flat.insert(flat.end(), seq.begin(), seq.end());
  }
  Container out;
  out.put_i32("tokens", flat);
  out.metadata["kind"] = "calib";
  out.metadata["source"] = c.source;
  out.metadata["sample_count"] = c.sample_count;
  out.metadata["sequence_length"] = c.sequence_length;
  return out;
}

CalibSet calib_from_container(const Container& c) {
  require(c.metadata.value("kind", "") == "calib", "corrupt_container", "container does not hold a calibration set");
  CalibSet out;
  out.source = c.metadata.at("source").get<std::string>();
  out.sample_count = c.metadata.at("sample_count").get<int>();
  out.sequence_length = c.metadata.at("sequence_length").get<int>();
  const auto flat = c.get_i32("tokens");
  require(out.sample_count >= 0 && out.sequence_length >= 0 &&
              flat.size() == static_cast<std::size_t>(out.sample_count) * static_cast<std::size_t>(out.sequence_length),
          "corrupt_container", "calibration tokens do not match sample_count x sequence_length");
  for (int i = 0; i < out.sample_count; ++i) {
    const auto first = flat.begin() + static_cast<std::ptrdiff_t>(i) * out.sequence_length;
    out.sequences.emplace_back(first, first + out.sequence_length);
  }
  return out;
}

void save_calib(const std::string& base, const CalibSet& c, const nlohmann::json& extra) {
  Container out = calib_to_container(c);
  if (!extra.is_null())
    for (const auto& [k, v] : extra.items()) out.metadata[k] = v;
  save(base, out);
}

CalibSet load_calib(const std::string& base) { return calib_from_container(load(base)); }

}  // namespace dllmq
