// SPDX-License-Identifier: Apache-2.0
//
// The classifier f = g(h(x)).
//
//   h: conv3x3(in->c1) + relu  [mix point 1]
//      conv3x3(c1->c2) + relu  [mix point 2]
//      global average pool -> fc(c2 -> d_z)
//   g: fc(d_z -> classes) + softmax
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fedalign/mixstyle.hpp"
#include "fedalign/numerics/tensor.hpp"

namespace fedalign::model {

using numerics::Shape;
using numerics::Tensor;

struct Architecture {
  std::size_t in_channels = 3;
  std::size_t conv1_channels = 8;
  std::size_t conv2_channels = 16;
  std::size_t d_z = 16;
  std::size_t num_classes = 5;
  std::size_t height = 16;
  std::size_t width = 16;
  std::vector<std::size_t> mix_points{1, 2};
};

std::vector<std::string> validate(const Architecture& arch);
std::size_t parameter_count(const Architecture& arch);
std::size_t channels_at(const Architecture& arch, std::size_t mix_point);

struct ParamEntry {
  std::string name;
  Shape shape;
  std::vector<double> values;
  bool operator==(const ParamEntry&) const = default;
};

// Value snapshot of all weights, in fixed architecture order. Copying a
// ModelParams copies the numbers; nothing is shared.
struct ModelParams {
  std::vector<ParamEntry> entries;

  std::size_t scalar_count() const;
  bool congruent_with(const ModelParams& other) const;
  bool operator==(const ModelParams&) const = default;
};

// Kaiming fan-in normal weights, zero biases.
ModelParams init_params(const Architecture& arch, std::uint64_t seed);

// Graph leaves for one forward/backward sequence over a ModelParams.
class BoundParams {
 public:
  static BoundParams bind(const ModelParams& params, bool trainable);

  std::span<Tensor> tensors() { return tensors_; }
  std::span<const Tensor> tensors() const { return tensors_; }
  const Tensor& operator[](std::size_t i) const { return tensors_[i]; }
  // Swaps in another tensor of the same shape for slot i.
  void set(std::size_t i, Tensor t);
  // Copies the current leaf values back into a value snapshot.
  ModelParams snapshot() const;
  void zero_grad();

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
};

// Mixing applied inside the encoder right after `point`'s conv+relu.
struct MixDirective {
  std::size_t point = 1;
  mixstyle::MixPlan plan;
};

// Z[B, d_z]. Validates x against `arch`.
Tensor encode(const Architecture& arch, const BoundParams& params, const Tensor& x,
              const MixDirective* mix = nullptr);
// Activation after mix point `point`'s conv+relu, unmixed.
Tensor encoder_activation(const Architecture& arch, const BoundParams& params, const Tensor& x,
                          std::size_t point);
Tensor logits(const Architecture& arch, const BoundParams& params, const Tensor& z);
// Row-wise class probabilities.
Tensor classify(const Architecture& arch, const BoundParams& params, const Tensor& z);

struct Forward {
  Tensor z;
  Tensor probs;
};
Forward forward_full(const Architecture& arch, const BoundParams& params, const Tensor& x,
                     const MixDirective* mix = nullptr);

// "FAW1" checkpoint: magic, u32 header length, JSON header listing
// {name, shape} in order, then every value as a little-endian f64.
std::vector<std::uint8_t> serialize_checkpoint(const ModelParams& params);
ModelParams deserialize_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace fedalign::model
