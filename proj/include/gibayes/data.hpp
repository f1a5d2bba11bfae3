#pragma once

// Synthetic generators, CSV ingestion and per-column normalisation.

#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "distributions.hpp"
#include "random.hpp"

namespace gibayes {

/// Per-column affine map x ↦ (x − mean) / std.
struct Normaliser {
  std::vector<double> mean, std;

  static Normaliser fit(const Tensor& x) {
    const std::size_t n = x.rows(), d = x.cols();
    if (n == 0) throw ShapeError("cannot normalise an empty matrix");
    Normaliser z{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
    for (std::size_t j = 0; j < d; ++j) {
      for (std::size_t i = 0; i < n; ++i) z.mean[j] += x(i, j);
      z.mean[j] /= static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) z.std[j] += (x(i, j) - z.mean[j]) * (x(i, j) - z.mean[j]);
      z.std[j] = std::sqrt(z.std[j] / static_cast<double>(n));
      if (!(z.std[j] > 0.0)) z.std[j] = 1.0;  // constant column
    }
    return z;
  }

  Tensor apply(const Tensor& x) const {
    check(x);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = (x(i, j) - mean[j]) / std[j];
    return out;
  }

  Tensor invert(const Tensor& x) const {
    check(x);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = x(i, j) * std[j] + mean[j];
    return out;
  }

  /// Sum of log std over columns: converts a normalised-space log density of
  /// one row into original units by subtraction.
  double log_jacobian() const {
    double s = 0.0;
    for (double v : std) s += std::log(v);
    return s;
  }

 private:
  void check(const Tensor& x) const {
    if (x.rank() != 2 || x.cols() != mean.size()) throw ShapeError("normaliser column count mismatch");
  }
};

struct ToyData {
  Tensor x, y;          // normalised, 40 × 1 each
  Tensor x_raw, y_raw;  // before normalisation
  Normaliser x_norm, y_norm;
  double noise_var = 0.0;  // true observation variance in normalised units
};

/// 40 points with x uniform on [−4, −2] ∪ [2, 4] and y = x³ + N(0, 3²),
/// both normalised to zero mean and unit (population) std.
inline ToyData gen_toy(std::uint64_t seed, std::size_t n = 40) {
  Rng rng(seed);
  ToyData d;
  d.x_raw = Tensor({n, 1});
  d.y_raw = Tensor({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    const double mag = rng.uniform(2.0, 4.0);
    const double x = rng.uniform() < 0.5 ? -mag : mag;
    d.x_raw(i, 0) = x;
    d.y_raw(i, 0) = x * x * x + 3.0 * rng.normal();
  }
  d.x_norm = Normaliser::fit(d.x_raw);
  d.y_norm = Normaliser::fit(d.y_raw);
  d.x = d.x_norm.apply(d.x_raw);
  d.y = d.y_norm.apply(d.y_raw);
  d.noise_var = 9.0 / (d.y_norm.std[0] * d.y_norm.std[0]);
  return d;
}

/// log N(y | 0, wv·XXᵀ + nv·I) via the matrix determinant lemma and Woodbury.
inline double linear_evidence(const Tensor& x, const Tensor& y, double weight_var, double noise_var) {
  const std::size_t n = x.rows(), d = x.cols();
  if (y.rows() != n || y.cols() != 1) throw ShapeError("linear evidence needs a single target column");
  const Eigen::MatrixXd xm = x.mat();
  const Eigen::VectorXd yv = y.mat().col(0);
  Eigen::MatrixXd a = xm.transpose() * xm * (weight_var / noise_var);
  a.diagonal().array() += 1.0;
  const Eigen::LLT<Eigen::MatrixXd> llt(a);
  if (llt.info() != Eigen::Success) throw NumericalError("linear evidence: factorisation failed");
  const Eigen::MatrixXd l = llt.matrixL();
  const double logdet = static_cast<double>(n) * std::log(noise_var) + 2.0 * l.diagonal().array().log().sum();
  const Eigen::VectorXd xty = xm.transpose() * yv;
  const double quad = (yv.squaredNorm() - (weight_var / noise_var) * xty.dot(llt.solve(xty))) / noise_var;
  return -0.5 * (quad + logdet + static_cast<double>(n) * kLog2Pi);
}

struct LinearData {
  Tensor x_train, y_train, x_test, y_test;
  Tensor weights;  // 5 × 1
  double evidence = 0.0;
  static constexpr double weight_var = 0.2, noise_var = 0.1;
};

/// Five standard-normal features mapped to one output through weights drawn
/// with variance 1/5, plus noise of variance 0.1.
inline LinearData gen_linear(std::uint64_t seed, std::size_t n_train = 1000, std::size_t n_test = 100) {
  Rng rng(seed);
  LinearData d;
  const std::size_t f = 5;
  d.weights = Tensor({f, 1});
  for (std::size_t j = 0; j < f; ++j) d.weights[j] = std::sqrt(LinearData::weight_var) * rng.normal();
  auto draw = [&](std::size_t n, Tensor& x, Tensor& y) {
    x = rng.normal({n, f});
    y = Tensor({n, 1});
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < f; ++j) s += x(i, j) * d.weights[j];
      y(i, 0) = s + std::sqrt(LinearData::noise_var) * rng.normal();
    }
  };
  draw(n_train, d.x_train, d.y_train);
  draw(n_test, d.x_test, d.y_test);
  d.evidence = linear_evidence(d.x_train, d.y_train, LinearData::weight_var, LinearData::noise_var);
  return d;
}

struct DgpToyData {
  Tensor x, y;  // normalised, n × 1
  Normaliser x_norm, y_norm;
};

/// Draws from a two-layer, width-one GP composition with unit squared-exponential
/// kernels: x ~ U(−3, 3), f₁ ~ GP(x), f₂ ~ GP(f₁), y = f₂ + N(0, noise_var).
inline DgpToyData gen_dgp_toy(std::uint64_t seed, std::size_t n = 100, double noise_var = 0.01) {
  Rng rng(seed);
  Tensor x({n, 1});
  for (std::size_t i = 0; i < n; ++i) x[i] = rng.uniform(-3.0, 3.0);
  auto gp_draw = [&](const Tensor& in) {
    Eigen::MatrixXd k(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) k(i, j) = std::exp(-0.5 * (in[i] - in[j]) * (in[i] - in[j]));
    k.diagonal().array() += 1e-8;
    const Eigen::LLT<Eigen::MatrixXd> llt(k);
    if (llt.info() != Eigen::Success) throw NumericalError("gp draw: factorisation failed");
    Eigen::VectorXd e(n);
    for (std::size_t i = 0; i < n; ++i) e[static_cast<Eigen::Index>(i)] = rng.normal();
    const Eigen::VectorXd f = llt.matrixL() * e;
    Tensor out({n, 1});
    for (std::size_t i = 0; i < n; ++i) out[i] = f[static_cast<Eigen::Index>(i)];
    return out;
  };
  Tensor y = gp_draw(gp_draw(x));
  for (std::size_t i = 0; i < n; ++i) y[i] += std::sqrt(noise_var) * rng.normal();
  DgpToyData d;
  d.x_norm = Normaliser::fit(x);
  d.y_norm = Normaliser::fit(y);
  d.x = d.x_norm.apply(x);
  d.y = d.y_norm.apply(y);
  return d;
}

struct Table {
  std::vector<std::string> header;
  Tensor values;  // rows × columns
};

/// Numeric CSV with a header row. Rows and columns in errors are 1-based and
/// count the header as row 1.
inline Table parse_csv(std::istream& in) {
  Table t;
  std::string line;
  auto split = [](const std::string& s) {
    std::vector<std::string> cells;
    std::size_t start = 0;
    for (;;) {
      const std::size_t pos = s.find(',', start);
      std::string c = s.substr(start, pos == std::string::npos ? std::string::npos : pos - start);
      const auto b = c.find_first_not_of(" \t\r"), e = c.find_last_not_of(" \t\r");
      cells.push_back(b == std::string::npos ? std::string() : c.substr(b, e - b + 1));
      if (pos == std::string::npos) break;
      start = pos + 1;
    }
    return cells;
  };
  if (!std::getline(in, line)) throw IngestionError("empty file: missing header row");
  t.header = split(line);
  const std::size_t cols = t.header.size();
  if (cols < 2) throw IngestionError("need at least one input column and a target column", 1, cols);
  std::vector<double> vals;
  std::size_t row = 1, n = 0;
  while (std::getline(in, line)) {
    ++row;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = split(line);
    if (cells.size() != cols)
      throw IngestionError("expected " + std::to_string(cols) + " cells, found " + std::to_string(cells.size()), row,
                           std::min(cells.size(), cols) + 1);
    for (std::size_t j = 0; j < cols; ++j) {
      const std::string& c = cells[j];
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(c.data(), c.data() + c.size(), v);
      if (c.empty() || ec != std::errc() || ptr != c.data() + c.size() || !std::isfinite(v))
        throw IngestionError("non-numeric cell '" + c + "'", row, j + 1);
      vals.push_back(v);
    }
    ++n;
  }
  if (n == 0) throw IngestionError("no data rows");
  t.values = Tensor({n, cols}, std::move(vals));
  return t;
}

inline Table read_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IngestionError("cannot open '" + path + "'");
  return parse_csv(f);
}

struct TabularSplit {
  Tensor x_train, y_train, x_test, y_test;  // normalised with train statistics
  Normaliser x_norm, y_norm;
};

/// Shuffled train/test split of a table (target = final column), seeded by
/// the split index, normalised with the training statistics.
inline TabularSplit split_table(const Table& t, std::size_t split_index, double test_fraction = 0.1) {
  const std::size_t n = t.values.rows(), cols = t.values.cols(), d = cols - 1;
  const auto n_test = static_cast<std::size_t>(std::lround(test_fraction * static_cast<double>(n)));
  if (n_test == 0 || n_test >= n) throw ConfigError("test fraction leaves an empty split");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(split_seed(0x5eed5, split_index));
  rng.shuffle(idx.begin(), idx.end());
  auto gather = [&](std::size_t from, std::size_t count, Tensor& x, Tensor& y) {
    x = Tensor({count, d});
    y = Tensor({count, 1});
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t r = idx[from + i];
      for (std::size_t j = 0; j < d; ++j) x(i, j) = t.values(r, j);
      y(i, 0) = t.values(r, d);
    }
  };
  TabularSplit s;
  Tensor xtr, ytr, xte, yte;
  gather(0, n - n_test, xtr, ytr);
  gather(n - n_test, n_test, xte, yte);
  s.x_norm = Normaliser::fit(xtr);
  s.y_norm = Normaliser::fit(ytr);
  s.x_train = s.x_norm.apply(xtr);
  s.y_train = s.y_norm.apply(ytr);
  s.x_test = s.x_norm.apply(xte);
  s.y_test = s.y_norm.apply(yte);
  return s;
}

inline TabularSplit load_tabular(const std::string& path, std::size_t split_index, double test_fraction = 0.1) {
  return split_table(read_csv(path), split_index, test_fraction);
}

}  // namespace gibayes
