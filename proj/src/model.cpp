// SPDX-License-Identifier: Apache-2.0
#include "fedalign/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

#include "json.hpp"

#include "fedalign/bytes.hpp"
#include "fedalign/errors.hpp"
#include "fedalign/numerics/ops.hpp"
#include "fedalign/rng.hpp"

namespace fedalign::model {

namespace ops = numerics;

namespace {

enum Slot : std::size_t { kConv1W, kConv1B, kConv2W, kConv2B, kFcW, kFcB, kClsW, kClsB, kSlotCount };

struct Layout {
  const char* name;
  Shape shape;
  std::size_t fan_in;  // 0 for biases
};

std::vector<Layout> layout(const Architecture& a) {
  return {
      {"encoder.conv1.weight", {a.conv1_channels, a.in_channels, 3, 3}, a.in_channels * 9},
      {"encoder.conv1.bias", {a.conv1_channels}, 0},
      {"encoder.conv2.weight", {a.conv2_channels, a.conv1_channels, 3, 3}, a.conv1_channels * 9},
      {"encoder.conv2.bias", {a.conv2_channels}, 0},
      {"encoder.fc.weight", {a.conv2_channels, a.d_z}, a.conv2_channels},
      {"encoder.fc.bias", {a.d_z}, 0},
      {"classifier.weight", {a.d_z, a.num_classes}, a.d_z},
      {"classifier.bias", {a.num_classes}, 0},
  };
}

constexpr char kMagic[] = "FAW1";

}  // namespace

std::vector<std::string> validate(const Architecture& a) {
  std::vector<std::string> problems;
  auto positive = [&](std::size_t v, const char* name) {
    if (v == 0) problems.push_back(std::string("model.") + name + " must be positive");
  };
  positive(a.in_channels, "in_channels");
  positive(a.conv1_channels, "conv1_channels");
  positive(a.conv2_channels, "conv2_channels");
  positive(a.d_z, "d_z");
  positive(a.height, "height");
  positive(a.width, "width");
  if (a.num_classes < 2) problems.push_back("model.num_classes must be >= 2");
  for (std::size_t p : a.mix_points)
    if (p != 1 && p != 2) problems.push_back("model.mix_points entries must name encoder layers 1 or 2");
  return problems;
}

std::size_t parameter_count(const Architecture& arch) {
  std::size_t n = 0;
  for (const auto& l : layout(arch)) n += numerics::numel(l.shape);
  return n;
}

std::size_t channels_at(const Architecture& arch, std::size_t mix_point) {
  if (mix_point == 1) return arch.conv1_channels;
  if (mix_point == 2) return arch.conv2_channels;
  throw ContractViolation("no encoder layer " + std::to_string(mix_point));
}

std::size_t ModelParams::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries) n += e.values.size();
  return n;
}

bool ModelParams::congruent_with(const ModelParams& other) const {
  if (entries.size() != other.entries.size()) return false;
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (entries[i].name != other.entries[i].name || entries[i].shape != other.entries[i].shape) return false;
  return true;
}

ModelParams init_params(const Architecture& arch, std::uint64_t seed) {
  if (auto problems = validate(arch); !problems.empty()) throw ConfigError(problems);
  Rng rng(seed);
  ModelParams p;
  for (const auto& l : layout(arch)) {
    ParamEntry e{l.name, l.shape, std::vector<double>(numerics::numel(l.shape), 0.0)};
    if (l.fan_in > 0) {
      const double stddev = std::sqrt(2.0 / static_cast<double>(l.fan_in));
      for (auto& v : e.values) v = rng.normal(0.0, stddev);
    }
    p.entries.push_back(std::move(e));
  }
  return p;
}

BoundParams BoundParams::bind(const ModelParams& params, bool trainable) {
  if (params.entries.size() != kSlotCount)
    throw ContractViolation("model parameters must have " + std::to_string(kSlotCount) + " entries");
  BoundParams b;
  for (const auto& e : params.entries) {
    b.names_.push_back(e.name);
    b.tensors_.push_back(trainable ? Tensor::parameter(e.shape, e.values) : Tensor::constant(e.shape, e.values));
  }
  return b;
}

ModelParams BoundParams::snapshot() const {
  ModelParams p;
  for (std::size_t i = 0; i < tensors_.size(); ++i)
    p.entries.push_back({names_[i], tensors_[i].shape(), {tensors_[i].values().begin(), tensors_[i].values().end()}});
  return p;
}

void BoundParams::set(std::size_t i, Tensor t) {
  if (i >= tensors_.size()) throw ContractViolation("BoundParams::set: no slot " + std::to_string(i));
  if (t.shape() != tensors_[i].shape())
    throw ContractViolation("BoundParams::set: " + names_[i] + " expects " + numerics::shape_string(tensors_[i].shape()));
  tensors_[i] = std::move(t);
}

void BoundParams::zero_grad() {
  for (auto& t : tensors_) t.zero_grad();
}

namespace {

void check_input(const Architecture& arch, const BoundParams& params, const Tensor& x) {
  if (params.tensors().size() != kSlotCount) throw ContractViolation("encode: unbound parameters");
  if (x.rank() != 4 || x.dim(1) != arch.in_channels || x.dim(2) != arch.height || x.dim(3) != arch.width)
    throw ContractViolation("encode: input " + numerics::shape_string(x.shape()) + " does not match [B," +
                            std::to_string(arch.in_channels) + "," + std::to_string(arch.height) + "," +
                            std::to_string(arch.width) + "]");
}

Tensor maybe_mix(const Tensor& act, std::size_t point, const MixDirective* mix) {
  if (!mix || mix->point != point) return act;
  return mixstyle::apply_plan(act, mix->plan);
}

}  // namespace

Tensor encode(const Architecture& arch, const BoundParams& params, const Tensor& x, const MixDirective* mix) {
  check_input(arch, params, x);
  if (mix && std::find(arch.mix_points.begin(), arch.mix_points.end(), mix->point) == arch.mix_points.end())
    throw ContractViolation("encode: " + std::to_string(mix->point) + " is not a configured mix point");
  Tensor h = ops::relu(ops::conv2d(x, params[kConv1W], params[kConv1B]));
  h = maybe_mix(h, 1, mix);
  h = ops::relu(ops::conv2d(h, params[kConv2W], params[kConv2B]));
  h = maybe_mix(h, 2, mix);
  const Tensor pooled = ops::global_avg_pool(h);
  return ops::add_row_bias(ops::matmul(pooled, params[kFcW]), params[kFcB]);
}

Tensor encoder_activation(const Architecture& arch, const BoundParams& params, const Tensor& x, std::size_t point) {
  check_input(arch, params, x);
  Tensor h = ops::relu(ops::conv2d(x, params[kConv1W], params[kConv1B]));
  if (point == 1) return h;
  if (point == 2) return ops::relu(ops::conv2d(h, params[kConv2W], params[kConv2B]));
  throw ContractViolation("encoder_activation: no encoder layer " + std::to_string(point));
}

Tensor logits(const Architecture& arch, const BoundParams& params, const Tensor& z) {
  if (z.rank() != 2 || z.dim(1) != arch.d_z)
    throw ContractViolation("classify: representation " + numerics::shape_string(z.shape()) + " is not [B," +
                            std::to_string(arch.d_z) + "]");
  return ops::add_row_bias(ops::matmul(z, params[kClsW]), params[kClsB]);
}

Tensor classify(const Architecture& arch, const BoundParams& params, const Tensor& z) {
  return ops::softmax(logits(arch, params, z));
}

Forward forward_full(const Architecture& arch, const BoundParams& params, const Tensor& x, const MixDirective* mix) {
  Forward f;
  f.z = encode(arch, params, x, mix);
  f.probs = classify(arch, params, f.z);
  return f;
}

std::vector<std::uint8_t> serialize_checkpoint(const ModelParams& params) {
  nlohmann::json header;
  header["params"] = nlohmann::json::array();
  for (const auto& e : params.entries) {
    if (e.values.size() != numerics::numel(e.shape))
      throw ContractViolation("serialize_checkpoint: " + e.name + " has inconsistent shape");
    header["params"].push_back({{"name", e.name}, {"shape", e.shape}});
  }
  const std::string text = header.dump();
  std::vector<std::uint8_t> out;
  out.reserve(8 + text.size() + params.scalar_count() * 8);
  ByteWriter w(out);
  w.raw(std::string_view(kMagic, 4));
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.raw(text);
  for (const auto& e : params.entries)
    for (double v : e.values) w.f64(v);
  return out;
}

ModelParams deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.raw(4) != std::string_view(kMagic, 4)) throw FormatError(0, "bad checkpoint magic");
  const std::uint32_t len = r.u32();
  const std::uint64_t header_at = r.offset();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.raw(len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(header_at, std::string("unreadable checkpoint header: ") + e.what());
  }
  ModelParams p;
  try {
    for (const auto& item : header.at("params")) {
      ParamEntry e;
      e.name = item.at("name").get<std::string>();
      e.shape = item.at("shape").get<Shape>();
      p.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(header_at, std::string("malformed checkpoint header: ") + e.what());
  }
  for (auto& e : p.entries) {
    const std::size_t n = numerics::numel(e.shape);
    if (n > r.remaining() / 8) throw FormatError(r.offset(), "truncated values for " + e.name);
    e.values.resize(n);
    for (auto& v : e.values) v = r.f64();
  }
  if (!r.done()) throw FormatError(r.offset(), "trailing bytes after checkpoint data");
  return p;
}

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(params);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace fedalign::model
