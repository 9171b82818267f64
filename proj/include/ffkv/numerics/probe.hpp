#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <set>
#include <span>
#include <vector>

#include "ffkv/numerics/matrix.hpp"
#include "ffkv/numerics/ops.hpp"
#include "ffkv/numerics/rng.hpp"

namespace ffkv {

struct ProbeConfig {
  double learning_rate = 0.5;
  std::size_t epochs = 300;
  double l2 = 1e-3;
  std::uint64_t seed = 0;
};

// Multinomial logistic-regression probe over standardized inputs.
struct ProbeModel {
  std::size_t classes = 0;
  std::vector<Vector> weights;  // per class, length = feature count
  Vector bias;                  // per class
  Vector feature_mean;
  Vector feature_scale;  // 1/std, or 1 for constant columns

  std::size_t feature_count() const { return feature_mean.size(); }

  std::vector<double> logits(std::span<const float> x) const {
    if (x.size() != feature_count()) throw DimensionError("ProbeModel: feature count mismatch");
    std::vector<double> z(classes, 0.0);
    for (std::size_t c = 0; c < classes; ++c) {
      double s = bias[c];
      for (std::size_t j = 0; j < x.size(); ++j)
        s += static_cast<double>(weights[c][j]) * (x[j] - feature_mean[j]) * feature_scale[j];
      z[c] = s;
    }
    return z;
  }

  int predict(std::span<const float> x) const {
    const auto z = logits(x);
    return static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
  }

  // Weight expressed in raw (unstandardized) input units.
  double raw_weight(std::size_t cls, std::size_t feature) const {
    return static_cast<double>(weights[cls][feature]) * feature_scale[feature];
  }
};

inline double probe_accuracy(const ProbeModel& probe, const Matrix& x, std::span<const int> y) {
  if (x.rows() != y.size()) throw DimensionError("probe_accuracy: row/label mismatch");
  if (y.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < x.rows(); ++i)
    if (probe.predict(x.row(i)) == y[i]) ++hit;
  return static_cast<double>(hit) / static_cast<double>(y.size());
}

// Full-batch gradient descent on the mean multinomial cross-entropy plus
// (l2/2)*||W||^2. Labels must be 0..m-1 with at least two classes present.
inline ProbeModel fit_linear_probe(const Matrix& x, std::span<const int> y, const ProbeConfig& config) {
  if (x.rows() != y.size()) throw DimensionError("fit_linear_probe: row/label mismatch");
  if (x.rows() == 0) throw Error("fit_linear_probe: empty training set");
  if (!x.all_finite()) throw Error("fit_linear_probe: non-finite input");
  std::set<int> present(y.begin(), y.end());
  if (present.size() < 2) throw Error("fit_linear_probe: need at least two classes");
  if (*present.begin() < 0) throw Error("fit_linear_probe: negative label");

  const std::size_t n = x.rows(), d = x.cols();
  const std::size_t m = static_cast<std::size_t>(*present.rbegin()) + 1;

  ProbeModel probe;
  probe.classes = m;
  probe.feature_mean.assign(d, 0.0f);
  probe.feature_scale.assign(d, 1.0f);
  for (std::size_t j = 0; j < d; ++j) {
    double s = 0.0, ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += x(i, j);
    const double mu = s / n;
    for (std::size_t i = 0; i < n; ++i) ss += (x(i, j) - mu) * (x(i, j) - mu);
    const double sd = std::sqrt(ss / n);
    probe.feature_mean[j] = static_cast<float>(mu);
    probe.feature_scale[j] = sd > 1e-12 ? static_cast<float>(1.0 / sd) : 1.0f;
  }

  // Standardized copy in double for the optimisation loop.
  std::vector<double> xs(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j)
      xs[i * d + j] = (static_cast<double>(x(i, j)) - probe.feature_mean[j]) * probe.feature_scale[j];

  RngStream rng(config.seed, 0x70726f6265ULL);
  std::vector<double> w(m * d), b(m, 0.0);
  for (auto& v : w) v = 0.01 * rng.normal();

  std::vector<double> gw(m * d), gb(m), z(m);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double* xi = xs.data() + i * d;
      double zmax = -1e300;
      for (std::size_t c = 0; c < m; ++c) {
        double s = b[c];
        const double* wc = w.data() + c * d;
        for (std::size_t j = 0; j < d; ++j) s += wc[j] * xi[j];
        z[c] = s;
        zmax = std::max(zmax, s);
      }
      double norm = 0.0;
      for (std::size_t c = 0; c < m; ++c) norm += (z[c] = std::exp(z[c] - zmax));
      for (std::size_t c = 0; c < m; ++c) {
        const double err = z[c] / norm - (static_cast<std::size_t>(y[i]) == c ? 1.0 : 0.0);
        gb[c] += err;
        double* gc = gw.data() + c * d;
        for (std::size_t j = 0; j < d; ++j) gc[j] += err * xi[j];
      }
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t k = 0; k < w.size(); ++k) w[k] -= config.learning_rate * (gw[k] * inv_n + config.l2 * w[k]);
    for (std::size_t c = 0; c < m; ++c) b[c] -= config.learning_rate * gb[c] * inv_n;
  }

  probe.weights.assign(m, Vector(d));
  probe.bias.assign(m, 0.0f);
  for (std::size_t c = 0; c < m; ++c) {
    probe.bias[c] = static_cast<float>(b[c]);
    for (std::size_t j = 0; j < d; ++j) probe.weights[c][j] = static_cast<float>(w[c * d + j]);
  }
  return probe;
}

}  // namespace ffkv
