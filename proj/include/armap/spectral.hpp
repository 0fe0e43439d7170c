#pragma once

// Singular spectra of task-vector matrices, layer-wise aggregates and the
// spectral-shadowing bound
//   ||D + g*P||_2 <= ||D||_2 + g*||P||_2 <= (1 + g*eps) * ||D||_2,
// with eps = ||P||_2 / ||D||_2 measured per tensor.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "armap/checkpoint.hpp"
#include "armap/error.hpp"
#include "armap/philox.hpp"
#include "armap/task_vector.hpp"

namespace armap::spectral {

/// Dense row-major matrix in double precision.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  Matrix transposed() const {
    Matrix t(cols, rows);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) t(j, i) = (*this)(i, j);
    return t;
  }

  static Matrix from_tensor(const TensorRecord& t) {
    if (t.rank() != 2) {
      throw ValueError("tensor '" + t.name + "' is not 2-D: shape " + shape_string(t.shape));
    }
    Matrix m(t.shape[0], t.shape[1]);
    std::copy(t.values.begin(), t.values.end(), m.data.begin());
    return m;
  }
};

/// Above this many rows or columns the spectrum comes from power iteration
/// with deflation instead of a full decomposition.
inline constexpr std::size_t kFullSvdLimit = 2048;
inline constexpr double kPowerTolerance = 1e-6;
inline constexpr int kPowerMaxIterations = 1000;
inline constexpr std::size_t kDefaultTopK = 64;

enum class SvdMethod { Auto, Full, Power };

namespace detail {

inline void require_valid(const Matrix& m) {
  if (m.rows == 0 || m.cols == 0) throw ValueError("matrix must have both dimensions >= 1");
  for (double v : m.data) {
    if (!std::isfinite(v)) throw ValueError("matrix contains NaN or Inf");
  }
}

// Householder reduction of a (rows >= cols) matrix to upper bidiagonal form.
// Returns the diagonal in d and the superdiagonal in e.
inline void bidiagonalize(Matrix a, std::vector<double>& d, std::vector<double>& e) {
  const std::size_t m = a.rows, n = a.cols;
  d.assign(n, 0.0);
  e.assign(n > 0 ? n - 1 : 0, 0.0);
  std::vector<double> v;
  for (std::size_t k = 0; k < n; ++k) {
    // Left reflector zeroes column k below the diagonal.
    double norm = 0.0;
    for (std::size_t i = k; i < m; ++i) norm = std::hypot(norm, a(i, k));
    if (norm != 0.0) {
      const double alpha = a(k, k) > 0 ? -norm : norm;
      v.assign(m - k, 0.0);
      for (std::size_t i = k; i < m; ++i) v[i - k] = a(i, k);
      v[0] -= alpha;
      for (double& x : v) x /= norm;  // keeps vv near 1 for tiny columns
      double vv = 0.0;
      for (double x : v) vv += x * x;
      if (vv != 0.0) {
        for (std::size_t j = k + 1; j < n; ++j) {
          double s = 0.0;
          for (std::size_t i = k; i < m; ++i) s += v[i - k] * a(i, j);
          s *= 2.0 / vv;
          for (std::size_t i = k; i < m; ++i) a(i, j) -= s * v[i - k];
        }
      }
      d[k] = alpha;
    }
    if (k + 1 >= n) break;
    // Right reflector zeroes row k beyond the superdiagonal.
    norm = 0.0;
    for (std::size_t j = k + 1; j < n; ++j) norm = std::hypot(norm, a(k, j));
    if (norm == 0.0) continue;
    const double alpha = a(k, k + 1) > 0 ? -norm : norm;
    v.assign(n - k - 1, 0.0);
    for (std::size_t j = k + 1; j < n; ++j) v[j - k - 1] = a(k, j);
    v[0] -= alpha;
    for (double& x : v) x /= norm;
    double vv = 0.0;
    for (double x : v) vv += x * x;
    if (vv != 0.0) {
      for (std::size_t i = k + 1; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = k + 1; j < n; ++j) s += v[j - k - 1] * a(i, j);
        s *= 2.0 / vv;
        for (std::size_t j = k + 1; j < n; ++j) a(i, j) -= s * v[j - k - 1];
      }
    }
    e[k] = alpha;
  }
}

// Eigenvalues of a symmetric tridiagonal matrix by implicit QL with
// Wilkinson-type shifts. diag has size N, off has size N (last entry unused).
inline void tridiagonal_eigenvalues(std::vector<double>& diag, std::vector<double>& off) {
  const std::size_t n = diag.size();
  if (n == 0) return;
  off.resize(n, 0.0);
  off[n - 1] = 0.0;
  double anorm = 0.0;
  for (std::size_t i = 0; i < n; ++i) anorm = std::max(anorm, std::fabs(diag[i]) + std::fabs(off[i]));
  const double tol = std::numeric_limits<double>::epsilon() * anorm;

  for (std::size_t l = 0; l < n; ++l) {
    int iterations = 0;
    std::size_t m;
    do {
      for (m = l; m + 1 < n; ++m) {
        if (std::fabs(off[m]) <= tol) break;
      }
      if (m != l) {
        if (++iterations > 100) throw Error("tridiagonal QL did not converge");
        double g = (diag[l + 1] - diag[l]) / (2.0 * off[l]);
        double r = std::hypot(g, 1.0);
        g = diag[m] - diag[l] + off[l] / (g + std::copysign(r, g));
        double s = 1.0, c = 1.0, p = 0.0;
        bool underflow = false;
        for (std::size_t ii = m; ii-- > l;) {
          double f = s * off[ii];
          const double b = c * off[ii];
          r = std::hypot(f, g);
          off[ii + 1] = r;
          if (r == 0.0) {
            diag[ii + 1] -= p;
            off[m] = 0.0;
            underflow = true;
            break;
          }
          s = f / r;
          c = g / r;
          g = diag[ii + 1] - p;
          r = (diag[ii] - g) * s + 2.0 * c * b;
          p = s * r;
          diag[ii + 1] = g + p;
          g = c * r - b;
        }
        if (underflow) continue;
        diag[l] -= p;
        off[l] = g;
        off[m] = 0.0;
      }
    } while (m != l);
  }
}

// All singular values of m via bidiagonalization followed by the eigenvalues
// of the Golub-Kahan tridiagonal matrix [0 B^T; B 0], which are +-sigma_i.
inline std::vector<double> full_singular_values(const Matrix& m) {
  const Matrix a = m.rows >= m.cols ? m : m.transposed();
  std::vector<double> d, e;
  bidiagonalize(a, d, e);
  const std::size_t n = d.size();
  std::vector<double> diag(2 * n, 0.0), off(2 * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    off[2 * i] = d[i];
    if (i + 1 < n) off[2 * i + 1] = e[i];
  }
  tridiagonal_eigenvalues(diag, off);
  std::sort(diag.begin(), diag.end(), std::greater<>());
  std::vector<double> sigma(diag.begin(), diag.begin() + static_cast<std::ptrdiff_t>(n));
  for (double& s : sigma) s = std::fabs(s);
  std::sort(sigma.begin(), sigma.end(), std::greater<>());
  return sigma;
}

inline double norm2(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace detail

/// Leading singular values by power iteration on A^T A with deflation of the
/// already-found triplets. Converged when ||A^T A v - lambda v|| <= tol * lambda.
inline std::vector<double> power_singular_values(const Matrix& a, std::size_t k,
                                                 double tol = kPowerTolerance,
                                                 int max_iterations = kPowerMaxIterations) {
  detail::require_valid(a);
  k = std::min(k, std::min(a.rows, a.cols));
  const std::size_t m = a.rows, n = a.cols;
  std::vector<double> sigmas;
  std::vector<std::vector<double>> us, vs;

  auto apply = [&](const std::vector<double>& x) {  // deflated A x
    std::vector<double> y(m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += a(i, j) * x[j];
      y[i] = s;
    }
    for (std::size_t t = 0; t < sigmas.size(); ++t) {
      const double c = sigmas[t] * detail::dot(vs[t], x);
      for (std::size_t i = 0; i < m; ++i) y[i] -= c * us[t][i];
    }
    return y;
  };
  auto apply_t = [&](const std::vector<double>& y) {  // deflated A^T y
    std::vector<double> x(n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) x[j] += a(i, j) * y[i];
    for (std::size_t t = 0; t < sigmas.size(); ++t) {
      const double c = sigmas[t] * detail::dot(us[t], y);
      for (std::size_t j = 0; j < n; ++j) x[j] -= c * vs[t][j];
    }
    return x;
  };

  const rng::Stream start(0x5eed5eedull, n);
  for (std::size_t idx = 0; idx < k; ++idx) {
    std::vector<double> v(n);
    for (std::size_t j = 0; j < n; ++j) v[j] = start.normal(idx * n + j);
    double nv = detail::norm2(v);
    for (double& x : v) x /= nv;
    for (int it = 0; it < max_iterations; ++it) {
      auto z = apply_t(apply(v));
      const double lambda = detail::dot(v, z);
      const double nz = detail::norm2(z);
      if (nz == 0.0) break;
      double resid = 0.0;
      for (std::size_t j = 0; j < n; ++j) resid += (z[j] - lambda * v[j]) * (z[j] - lambda * v[j]);
      for (std::size_t j = 0; j < n; ++j) v[j] = z[j] / nz;
      if (std::sqrt(resid) <= tol * lambda) break;
    }
    auto u = apply(v);
    const double sigma = detail::norm2(u);
    if (sigma == 0.0) {
      sigmas.resize(k, 0.0);
      break;
    }
    for (double& x : u) x /= sigma;
    sigmas.push_back(sigma);
    us.push_back(std::move(u));
    vs.push_back(std::move(v));
  }
  std::sort(sigmas.begin(), sigmas.end(), std::greater<>());
  return sigmas;
}

/// Descending singular values; at most top_k of them when given.
inline std::vector<double> svd_spectrum(const Matrix& m, std::optional<std::size_t> top_k = std::nullopt,
                                        SvdMethod method = SvdMethod::Auto) {
  detail::require_valid(m);
  const std::size_t r = std::min(m.rows, m.cols);
  const std::size_t k = top_k ? std::min(*top_k, r) : r;
  if (method == SvdMethod::Auto) {
    method = std::max(m.rows, m.cols) <= kFullSvdLimit ? SvdMethod::Full : SvdMethod::Power;
  }
  if (method == SvdMethod::Power) return power_singular_values(m, k);
  auto sigma = detail::full_singular_values(m);
  sigma.resize(k);
  return sigma;
}

/// Largest singular value.
inline double spectral_norm(const Matrix& m) { return svd_spectrum(m, 1).front(); }

/// Power-iteration estimate of the largest singular value.
inline double power_spectral_norm(const Matrix& m) { return power_singular_values(m, 1).front(); }

/// Layer index from a "layers.{i}." prefix; -1 when the name has none.
inline int layer_index(const std::string& name) {
  constexpr std::string_view prefix = "layers.";
  if (name.rfind(prefix, 0) != 0) return -1;
  std::size_t pos = prefix.size();
  std::size_t end = pos;
  while (end < name.size() && std::isdigit(static_cast<unsigned char>(name[end]))) ++end;
  if (end == pos || end >= name.size() || name[end] != '.' || end - pos > 9) return -1;
  return std::stoi(name.substr(pos, end - pos));
}

// ---------------------------------------------------------------------------
// Layer-wise report

struct SpectrumEntry {
  std::string name;
  int layer = -1;
  std::vector<double> singular_values;
  std::size_t rank_computed = 0;

  double sigma_max() const { return singular_values.empty() ? 0.0 : singular_values.front(); }
};

struct LayerAggregate {
  double max_sigma = 0.0;
  double min_sigma = 0.0;
  double mean_sigma = 0.0;
  std::size_t count = 0;
};

struct SpectralReport {
  std::vector<SpectrumEntry> entries;
  std::vector<std::string> skipped;
  std::map<int, LayerAggregate> layer_aggregates;
  std::size_t top_k = kDefaultTopK;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["top_k"] = top_k;
    j["entries"] = nlohmann::ordered_json::array();
    for (const auto& e : entries) {
      j["entries"].push_back({{"name", e.name},
                              {"layer", e.layer},
                              {"rank_computed", e.rank_computed},
                              {"singular_values", e.singular_values}});
    }
    j["layer_aggregates"] = nlohmann::ordered_json::array();
    for (const auto& [layer, a] : layer_aggregates) {
      j["layer_aggregates"].push_back({{"layer", layer},
                                       {"max_sigma1", a.max_sigma},
                                       {"min_sigma1", a.min_sigma},
                                       {"mean_sigma1", a.mean_sigma},
                                       {"tensors", a.count}});
    }
    j["skipped"] = skipped;
    return j;
  }

  /// One row per analyzed tensor.
  std::string to_csv() const {
    std::ostringstream os;
    os << "name,layer,rank_computed,sigma1,singular_values\n";
    for (const auto& e : entries) {
      os << e.name << ',' << e.layer << ',' << e.rank_computed << ',' << format_real(e.sigma_max()) << ',';
      for (std::size_t i = 0; i < e.singular_values.size(); ++i) {
        if (i) os << ' ';
        os << format_real(e.singular_values[i]);
      }
      os << '\n';
    }
    return os.str();
  }
};

/// Spectrum of every 2-D tensor, grouped by layer. Other ranks are skipped.
inline SpectralReport layer_report(const TaskVector& tv, std::size_t top_k = kDefaultTopK) {
  SpectralReport report;
  report.top_k = top_k;
  for (const auto& [name, t] : tv.delta) {
    if (t.rank() != 2 || t.numel() == 0) {
      report.skipped.push_back(name);
      continue;
    }
    SpectrumEntry e;
    e.name = name;
    e.layer = layer_index(name);
    e.singular_values = svd_spectrum(Matrix::from_tensor(t), top_k);
    e.rank_computed = e.singular_values.size();
    report.entries.push_back(std::move(e));
  }
  std::map<int, double> sums;
  for (const auto& e : report.entries) {
    auto [it, fresh] = report.layer_aggregates.try_emplace(e.layer);
    auto& a = it->second;
    const double s = e.sigma_max();
    a.max_sigma = fresh ? s : std::max(a.max_sigma, s);
    a.min_sigma = fresh ? s : std::min(a.min_sigma, s);
    sums[e.layer] += s;
    ++a.count;
  }
  for (auto& [layer, a] : report.layer_aggregates) a.mean_sigma = sums[layer] / static_cast<double>(a.count);
  return report;
}

// ---------------------------------------------------------------------------
// Spectral shadowing

/// Relative slack for comparing computed norms against the bound; the
/// decomposition itself is accurate to a few ulps of sigma_1.
inline constexpr double kBoundSlack = 1e-10;

struct ShadowingEntry {
  std::string name;
  double norm_diff = 0.0;
  double norm_pref = 0.0;
  double epsilon = 0.0;  // +inf when norm_diff == 0
  double combined_norm = 0.0;
  double triangle = 0.0;  // norm_diff + gamma * norm_pref
  double bound = 0.0;     // (1 + gamma * epsilon) * norm_diff
  bool degenerate = false;
  bool bound_holds = true;
};

struct ShadowingReport {
  std::vector<ShadowingEntry> entries;
  double gamma = 0.0;
  double global_epsilon = 0.0;
  std::vector<std::string> degenerate;

  bool all_hold() const {
    return std::all_of(entries.begin(), entries.end(),
                       [](const ShadowingEntry& e) { return e.degenerate || e.bound_holds; });
  }

  nlohmann::ordered_json to_json() const {
    auto num = [](double v) -> nlohmann::ordered_json {
      if (std::isinf(v)) return v > 0 ? "+inf" : "-inf";
      return v;
    };
    nlohmann::ordered_json j;
    j["gamma"] = gamma;
    j["global_epsilon"] = global_epsilon;
    j["entries"] = nlohmann::ordered_json::array();
    for (const auto& e : entries) {
      nlohmann::ordered_json row;
      row["name"] = e.name;
      row["norm_diff"] = e.norm_diff;
      row["norm_pref"] = e.norm_pref;
      row["epsilon"] = num(e.epsilon);
      row["combined_norm"] = e.combined_norm;
      if (e.degenerate) {
        row["bound"] = nullptr;
        row["bound_holds"] = nullptr;
      } else {
        row["bound"] = e.bound;
        row["bound_holds"] = e.bound_holds;
      }
      row["degenerate"] = e.degenerate;
      j["entries"].push_back(std::move(row));
    }
    j["degenerate"] = degenerate;
    j["all_bounds_hold"] = all_hold();
    return j;
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << "name,norm_diff,norm_pref,epsilon,combined_norm,bound,bound_holds,degenerate\n";
    for (const auto& e : entries) {
      os << e.name << ',' << format_real(e.norm_diff) << ',' << format_real(e.norm_pref) << ','
         << (e.degenerate ? std::string("inf") : format_real(e.epsilon)) << ','
         << format_real(e.combined_norm) << ',' << (e.degenerate ? std::string() : format_real(e.bound))
         << ',' << (e.degenerate ? "" : (e.bound_holds ? "true" : "false")) << ','
         << (e.degenerate ? "true" : "false") << '\n';
    }
    return os.str();
  }
};

/// Per 2-D tensor: the norms of both task vectors, their ratio and the norm
/// of the actual sum tau_diff + gamma * tau_pref checked against the bound.
inline ShadowingReport shadowing_report(const TaskVector& tau_diff, const TaskVector& tau_pref, double gamma) {
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) {
    throw ValueError("gamma must be finite and >= 0, got " + format_real(gamma));
  }
  require_compatible(tau_diff.delta, tau_pref.delta);
  ShadowingReport report;
  report.gamma = gamma;
  for (const auto& [name, d] : tau_diff.delta) {
    if (d.rank() != 2 || d.numel() == 0) continue;
    const auto& p = tau_pref.delta.at(name);
    const Matrix md = Matrix::from_tensor(d);
    const Matrix mp = Matrix::from_tensor(p);
    Matrix sum(md.rows, md.cols);
    for (std::size_t i = 0; i < sum.data.size(); ++i) sum.data[i] = md.data[i] + gamma * mp.data[i];

    ShadowingEntry e;
    e.name = name;
    e.norm_diff = spectral_norm(md);
    e.norm_pref = spectral_norm(mp);
    e.combined_norm = spectral_norm(sum);
    e.triangle = e.norm_diff + gamma * e.norm_pref;
    if (e.norm_diff == 0.0) {
      e.degenerate = true;
      e.epsilon = std::numeric_limits<double>::infinity();
      e.bound = std::numeric_limits<double>::infinity();
      report.degenerate.push_back(name);
    } else {
      e.epsilon = e.norm_pref / e.norm_diff;
      e.bound = (1.0 + gamma * e.epsilon) * e.norm_diff;
      const double slack = kBoundSlack * e.bound;
      e.bound_holds = e.combined_norm <= e.triangle + slack && e.triangle <= e.bound + slack;
      report.global_epsilon = std::max(report.global_epsilon, e.epsilon);
    }
    report.entries.push_back(std::move(e));
  }
  return report;
}

}  // namespace armap::spectral
