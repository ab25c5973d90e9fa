// Plain-loop reference implementations of the training losses, written
// independently of the tensor engine.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace fedalign::oracle {

using Matrix = std::vector<std::vector<double>>;

inline Matrix rows_of(std::span<const double> flat, std::size_t rows, std::size_t cols) {
  Matrix m(rows, std::vector<double>(cols));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) m[r][c] = flat[r * cols + c];
  return m;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

// Anchors from `view`, candidates from `reference`; positives share the label
// and have a different index.
inline double supcon(const Matrix& view, const Matrix& reference, const std::vector<std::size_t>& labels,
                     double tau) {
  const std::size_t B = view.size();
  double total = 0.0;
  std::size_t anchors = 0;
  for (std::size_t i = 0; i < B; ++i) {
    std::vector<std::size_t> positives;
    for (std::size_t p = 0; p < B; ++p)
      if (p != i && labels[p] == labels[i]) positives.push_back(p);
    if (positives.empty()) continue;
    double denom = 0.0;
    for (std::size_t a = 0; a < B; ++a) denom += std::exp(cosine(view[i], reference[a]) / tau);
    double term = 0.0;
    for (std::size_t p : positives) term += -std::log(std::exp(cosine(view[i], reference[p]) / tau) / denom);
    total += term / static_cast<double>(positives.size());
    ++anchors;
  }
  return anchors == 0 ? 0.0 : total / static_cast<double>(anchors);
}

inline double consistency(const Matrix& z, const std::vector<Matrix>& views) {
  double total = 0.0;
  for (const auto& v : views) {
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t r = 0; r < z.size(); ++r)
      for (std::size_t c = 0; c < z[r].size(); ++c, ++n) s += (z[r][c] - v[r][c]) * (z[r][c] - v[r][c]);
    total += s / static_cast<double>(n);
  }
  return total / static_cast<double>(views.size());
}

inline double kl(const std::vector<double>& p, const std::vector<double>& q) {
  const double floor = 1e-12;
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += p[i] * std::log(std::max(p[i], floor) / std::max(q[i], floor));
  return s;
}

inline double js(const Matrix& y, const Matrix& y1, const Matrix& y2) {
  double total = 0.0;
  for (std::size_t r = 0; r < y.size(); ++r) {
    std::vector<double> m(y[r].size());
    for (std::size_t c = 0; c < m.size(); ++c) m[c] = (y[r][c] + y1[r][c] + y2[r][c]) / 3.0;
    total += (kl(y[r], m) + kl(y1[r], m) + kl(y2[r], m)) / 3.0;
  }
  return total / static_cast<double>(y.size());
}

inline double cross_entropy(const Matrix& probs, const std::vector<std::size_t>& labels) {
  double s = 0.0;
  for (std::size_t r = 0; r < probs.size(); ++r) s += -std::log(std::max(probs[r][labels[r]], 1e-12));
  return s / static_cast<double>(probs.size());
}

}  // namespace fedalign::oracle
