// SPDX-License-Identifier: Apache-2.0
#include "fedalign/data.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <unordered_map>

#include "fedalign/bytes.hpp"
#include "fedalign/errors.hpp"

namespace fedalign::data {

DomainSpec DomainSpec::identity(std::uint16_t id) {
  DomainSpec s;
  s.id = id;
  return s;
}

double DomainSpec::mixing_determinant() const {
  const auto& m = mixing;
  return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
         m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

std::array<double, 3> DomainSpec::expected_channel_mean(double content_mean) const {
  std::array<double, 3> out{};
  for (std::size_t c = 0; c < 3; ++c) {
    double row = 0.0;
    for (std::size_t d = 0; d < 3; ++d) row += mixing[c][d];
    out[c] = gain[c] * row * content_mean + bias[c];
  }
  return out;
}

std::vector<std::string> validate(const DataConfig& cfg) {
  std::vector<std::string> problems;
  if (cfg.domains < 2) problems.push_back("data.domains must be >= 2");
  if (cfg.domains > 0xFFFF) problems.push_back("data.domains must fit in 16 bits");
  if (cfg.classes < 2) problems.push_back("data.classes must be >= 2");
  if (cfg.classes > 0xFFFF) problems.push_back("data.classes must fit in 16 bits");
  if (cfg.per_domain < 1) problems.push_back("data.per_domain must be >= 1");
  if (cfg.image_size < 3 || cfg.image_size > 0xFFFF) problems.push_back("data.image_size must be >= 3");
  if (!(cfg.skew >= 0.0 && cfg.skew <= 1.0)) problems.push_back("data.skew must be in [0, 1]");
  if (!(cfg.min_mean_shift >= 0.0)) problems.push_back("data.min_mean_shift must be >= 0");
  return problems;
}

namespace {

constexpr double kContentMean = 0.5;
constexpr int kSpecAttempts = 10000;

DomainSpec draw_spec(std::uint16_t id, Rng& rng) {
  DomainSpec s;
  s.id = id;
  for (std::size_t c = 0; c < 3; ++c) {
    s.gain[c] = std::exp(rng.normal(0.0, 0.35));
    s.bias[c] = -0.8 + 1.6 * rng.uniform();
  }
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t d = 0; d < 3; ++d) s.mixing[c][d] = (c == d ? 1.0 : 0.0) + rng.normal(0.0, 0.15);
  s.noise = 0.02 + 0.15 * rng.uniform();
  return s;
}

double max_channel_shift(const DomainSpec& a, const DomainSpec& b) {
  const auto ma = a.expected_channel_mean(kContentMean);
  const auto mb = b.expected_channel_mean(kContentMean);
  double best = 0.0;
  for (std::size_t c = 0; c < 3; ++c) best = std::max(best, std::abs(ma[c] - mb[c]));
  return best;
}

// Oriented grating; orientation encodes the class, period and phase are
// per-sample content jitter.
std::vector<double> render_content(std::size_t label, std::size_t classes, std::size_t size, Rng& rng) {
  const double angle = M_PI * static_cast<double>(label) / static_cast<double>(classes) + rng.normal(0.0, 0.05);
  const double period = 3.0 + 2.0 * rng.uniform();
  const double phase = 2.0 * M_PI * rng.uniform();
  const double contrast = 0.8 + 0.4 * rng.uniform();
  const double ca = std::cos(angle), sa = std::sin(angle);
  std::vector<double> plane(size * size);
  for (std::size_t h = 0; h < size; ++h)
    for (std::size_t w = 0; w < size; ++w) {
      const double t = static_cast<double>(w) * ca + static_cast<double>(h) * sa;
      plane[h * size + w] =
          kContentMean + 0.5 * contrast * std::sin(2.0 * M_PI * t / period + phase) + 0.05 * rng.normal();
    }
  return plane;
}

}  // namespace

std::vector<DomainSpec> make_domain_specs(const DataConfig& cfg, std::uint64_t seed) {
  if (auto problems = validate(cfg); !problems.empty()) throw ConfigError(problems);
  Rng rng(derive_seed(seed, {stream_id(Stream::DataGenerate), 0}));
  for (int attempt = 0; attempt < kSpecAttempts; ++attempt) {
    std::vector<DomainSpec> specs;
    for (std::size_t d = 0; d < cfg.domains; ++d) specs.push_back(draw_spec(static_cast<std::uint16_t>(d), rng));
    bool ok = true;
    for (std::size_t i = 0; i < specs.size() && ok; ++i) {
      if (std::abs(specs[i].mixing_determinant()) <= 1e-3) ok = false;
      for (std::size_t j = i + 1; j < specs.size() && ok; ++j)
        if (max_channel_shift(specs[i], specs[j]) < cfg.min_mean_shift) ok = false;
    }
    if (ok) return specs;
  }
  throw DegenerateInput("could not draw domain styles separated by min_mean_shift");
}

Dataset generate_synthetic_domains(const DataConfig& cfg, std::uint64_t seed) {
  const auto specs = make_domain_specs(cfg, seed);
  return generate_with_specs(cfg, specs, seed);
}

Dataset generate_with_specs(const DataConfig& cfg, std::span<const DomainSpec> specs, std::uint64_t seed) {
  if (auto problems = validate(cfg); !problems.empty()) throw ConfigError(problems);
  if (specs.size() != cfg.domains) throw ContractViolation("generate_with_specs: one DomainSpec per domain required");
  for (const auto& s : specs)
    if (std::abs(s.mixing_determinant()) <= 1e-3)
      throw ContractViolation("domain " + std::to_string(s.id) + " has a non-invertible channel mixing matrix");

  const std::size_t size = cfg.image_size, plane = size * size;
  Dataset ds;
  ds.info = {static_cast<std::uint16_t>(cfg.classes), static_cast<std::uint16_t>(cfg.domains), 3,
             static_cast<std::uint16_t>(size), static_cast<std::uint16_t>(size)};

  std::vector<std::vector<double>> content(cfg.per_domain);
  for (std::size_t i = 0; i < cfg.per_domain; ++i) {
    Rng rng(derive_seed(seed, {stream_id(Stream::DataGenerate), 1, i}));
    content[i] = render_content(i % cfg.classes, cfg.classes, size, rng);
  }

  ds.samples.reserve(cfg.domains * cfg.per_domain);
  for (std::size_t d = 0; d < cfg.domains; ++d) {
    const DomainSpec& s = specs[d];
    for (std::size_t i = 0; i < cfg.per_domain; ++i) {
      Rng noise(derive_seed(seed, {stream_id(Stream::DataGenerate), 2, d, i}));
      LabeledSample smp;
      smp.label = static_cast<std::uint16_t>(i % cfg.classes);
      smp.domain = static_cast<std::uint16_t>(d);
      smp.sample_id = static_cast<std::uint32_t>(d * cfg.per_domain + i);
      smp.image.resize(3 * plane);
      const auto& p = content[i];
      for (std::size_t c = 0; c < 3; ++c) {
        double row = 0.0;
        for (std::size_t k = 0; k < 3; ++k) row += s.mixing[c][k];
        for (std::size_t t = 0; t < plane; ++t) {
          double v = s.gain[c] * row * p[t] + s.bias[c];
          if (s.noise > 0.0) v += s.noise * noise.normal();
          smp.image[c * plane + t] = static_cast<float>(v);
        }
      }
      ds.samples.push_back(std::move(smp));
    }
  }
  return ds;
}

Tensor to_batch(const DatasetInfo& info, std::span<const LabeledSample* const> samples) {
  if (samples.empty()) throw ContractViolation("to_batch: empty batch");
  const std::size_t px = info.pixels();
  std::vector<double> values;
  values.reserve(samples.size() * px);
  for (const auto* s : samples) {
    if (s->image.size() != px) throw ContractViolation("to_batch: sample image has wrong size");
    values.insert(values.end(), s->image.begin(), s->image.end());
  }
  return Tensor::constant({samples.size(), info.channels, info.height, info.width}, std::move(values));
}

std::vector<std::size_t> labels_of(std::span<const LabeledSample* const> samples) {
  std::vector<std::size_t> out;
  out.reserve(samples.size());
  for (const auto* s : samples) out.push_back(s->label);
  return out;
}

ClientAssignment partition_to_clients(std::span<const LabeledSample> samples, std::size_t clients, double skew,
                                      Rng& rng) {
  if (clients == 0) throw ContractViolation("partition_to_clients: need at least one client");
  if (clients > samples.size())
    throw ContractViolation("partition_to_clients: " + std::to_string(clients) + " clients for " +
                            std::to_string(samples.size()) + " samples");
  if (!(skew >= 0.0 && skew <= 1.0)) throw ContractViolation("partition_to_clients: skew must be in [0, 1]");

  std::set<std::uint16_t> domain_set;
  for (const auto& s : samples) domain_set.insert(s.domain);
  const std::vector<std::uint16_t> domains(domain_set.begin(), domain_set.end());
  std::unordered_map<std::uint16_t, std::size_t> domain_rank;
  for (std::size_t i = 0; i < domains.size(); ++i) domain_rank[domains[i]] = i;

  // Clients that hold each domain when skew = 1.
  std::vector<std::vector<std::size_t>> home(domains.size());
  if (clients >= domains.size()) {
    for (std::size_t c = 0; c < clients; ++c) home[c % domains.size()].push_back(c);
  } else {
    for (std::size_t d = 0; d < domains.size(); ++d) home[d].push_back(d % clients);
  }

  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order.begin(), order.end());

  std::vector<std::vector<std::size_t>> affine(domains.size());
  std::vector<std::size_t> pooled;
  for (std::size_t idx : order) {
    if (rng.uniform() < skew)
      affine[domain_rank[samples[idx].domain]].push_back(idx);
    else
      pooled.push_back(idx);
  }

  ClientAssignment out(clients);
  for (std::size_t d = 0; d < domains.size(); ++d)
    for (std::size_t k = 0; k < affine[d].size(); ++k)
      out[home[d][k % home[d].size()]].push_back(samples[affine[d][k]].sample_id);
  for (std::size_t idx : pooled) {
    std::size_t target = 0;
    for (std::size_t c = 1; c < clients; ++c)
      if (out[c].size() < out[target].size()) target = c;
    out[target].push_back(samples[idx].sample_id);
  }
  for (auto& ids : out) std::sort(ids.begin(), ids.end());
  return out;
}

SplitPlan leave_one_domain_out(const Dataset& dataset, std::uint16_t target, std::size_t clients, double skew,
                               std::uint64_t seed) {
  if (clients < 1) throw ContractViolation("leave_one_domain_out: need at least one client");
  SplitPlan plan;
  plan.target_domain = target;
  std::vector<LabeledSample> source;
  for (const auto& s : dataset.samples) {
    if (s.domain == target)
      plan.test_ids.push_back(s.sample_id);
    else
      source.push_back(s);
  }
  if (target >= dataset.info.num_domains || plan.test_ids.empty())
    throw ContractViolation("leave_one_domain_out: unknown domain " + std::to_string(target));
  if (source.empty()) throw DegenerateInput("leave_one_domain_out: no source domains remain");
  Rng rng(derive_seed(seed, {stream_id(Stream::DataPartition), target, clients}));
  plan.train = partition_to_clients(source, clients, skew, rng);
  return plan;
}

std::vector<const LabeledSample*> select(const Dataset& dataset, std::span<const std::uint32_t> ids) {
  std::unordered_map<std::uint32_t, const LabeledSample*> by_id;
  by_id.reserve(dataset.samples.size());
  for (const auto& s : dataset.samples) by_id.emplace(s.sample_id, &s);
  std::vector<const LabeledSample*> out;
  out.reserve(ids.size());
  for (std::uint32_t id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw ContractViolation("no sample with id " + std::to_string(id));
    out.push_back(it->second);
  }
  return out;
}

namespace {

constexpr char kMagic[] = "FDGD";
constexpr std::size_t kHeaderSize = 4 + 2 + 4 + 2 * 5;

}  // namespace

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  std::vector<std::uint8_t> buf;
  ByteWriter w(buf);
  w.raw(std::string_view(kMagic, 4));
  w.u16(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(dataset.samples.size()));
  w.u16(dataset.info.num_classes);
  w.u16(dataset.info.num_domains);
  w.u16(dataset.info.channels);
  w.u16(dataset.info.height);
  w.u16(dataset.info.width);
  const std::size_t px = dataset.info.pixels();
  for (const auto& s : dataset.samples) {
    if (s.image.size() != px) throw ContractViolation("save_dataset: sample image has wrong size");
    w.u32(s.sample_id);
    w.u16(s.domain);
    w.u16(s.label);
    for (float v : s.image) w.f32(v);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

DatasetReader::DatasetReader(const std::filesystem::path& path) : in_(path, std::ios::binary) {
  if (!in_) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> head(kHeaderSize);
  in_.read(reinterpret_cast<char*>(head.data()), static_cast<std::streamsize>(head.size()));
  head.resize(static_cast<std::size_t>(in_.gcount()));
  ByteReader r(head);
  if (head.size() < 4 || r.raw(4) != std::string_view(kMagic, 4)) throw FormatError(0, "bad dataset magic");
  const std::uint16_t version = r.u16();
  if (version != kFormatVersion) throw FormatError(4, "unsupported dataset version " + std::to_string(version));
  count_ = r.u32();
  info_.num_classes = r.u16();
  info_.num_domains = r.u16();
  info_.channels = r.u16();
  info_.height = r.u16();
  info_.width = r.u16();
  offset_ = kHeaderSize;
}

std::optional<LabeledSample> DatasetReader::next() {
  if (read_ == count_) return std::nullopt;
  const std::size_t record = 8 + 4 * info_.pixels();
  std::vector<std::uint8_t> buf(record);
  in_.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(record));
  const auto got = static_cast<std::size_t>(in_.gcount());
  if (got < record)
    throw FormatError(offset_ + got, "truncated record " + std::to_string(read_) + " of " + std::to_string(count_));
  ByteReader r(buf, offset_);
  LabeledSample s;
  s.sample_id = r.u32();
  s.domain = r.u16();
  s.label = r.u16();
  if (s.domain >= info_.num_domains) throw FormatError(offset_ + 4, "domain " + std::to_string(s.domain) + " out of range");
  if (s.label >= info_.num_classes) throw FormatError(offset_ + 6, "label " + std::to_string(s.label) + " out of range");
  s.image.resize(info_.pixels());
  for (auto& v : s.image) v = r.f32();
  offset_ += record;
  ++read_;
  return s;
}

Dataset load_dataset(const std::filesystem::path& path) {
  DatasetReader reader(path);
  Dataset ds;
  ds.info = reader.info();
  ds.samples.reserve(reader.count());
  while (auto s = reader.next()) ds.samples.push_back(std::move(*s));
  return ds;
}

}  // namespace fedalign::data
