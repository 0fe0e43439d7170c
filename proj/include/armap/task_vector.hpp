#pragma once

// Task vectors (checkpoint-shaped deltas) and the merges built on them:
// linear task arithmetic, scaled application, TIES and DARE.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "armap/checkpoint.hpp"
#include "armap/philox.hpp"

namespace armap {

inline constexpr const char* kToolkitVersion = "0.1.0";

/// Shortest decimal that round-trips the double.
inline std::string format_real(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

struct TaskVector {
  Checkpoint delta;
  std::string base_name;
  std::string target_name;

  /// File form: a checkpoint tagged with its origin.
  Checkpoint to_checkpoint() const {
    Checkpoint c = delta;
    c.metadata()["armap.kind"] = "task_vector";
    c.metadata()["armap.origin.base"] = base_name;
    c.metadata()["armap.origin.target"] = target_name;
    return c;
  }

  static TaskVector from_checkpoint(Checkpoint c) {
    TaskVector tv;
    auto& md = c.metadata();
    if (auto it = md.find("armap.origin.base"); it != md.end()) tv.base_name = it->second;
    if (auto it = md.find("armap.origin.target"); it != md.end()) tv.target_name = it->second;
    md.erase("armap.kind");
    md.erase("armap.origin.base");
    md.erase("armap.origin.target");
    tv.delta = std::move(c);
    return tv;
  }
};

inline TaskVector load_task_vector(const std::filesystem::path& path, const LoadOptions& opts = {}) {
  return TaskVector::from_checkpoint(load_checkpoint(path, opts));
}

inline void save_task_vector(const TaskVector& tv, const std::filesystem::path& path,
                             const SaveOptions& opts = {}) {
  save_checkpoint(tv.to_checkpoint(), path, opts);
}

/// Elementwise target - base.
inline TaskVector diff(const Checkpoint& target, const Checkpoint& base,
                       std::string target_name = "target", std::string base_name = "base") {
  require_compatible(target, base);
  TaskVector tv;
  tv.base_name = std::move(base_name);
  tv.target_name = std::move(target_name);
  for (const auto& [name, t] : target) {
    const auto& b = base.at(name);
    std::vector<float> v(t.values.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = t.values[i] - b.values[i];
    tv.delta.add(name, t.shape, std::move(v));
  }
  return tv;
}

/// One (task vector, coefficient) term of a linear merge.
struct MergeTerm {
  const TaskVector* vector;
  double coefficient;
};

struct MergePlan {
  const Checkpoint* base;
  std::vector<MergeTerm> terms;
};

/// W = W0 + sum_i c_i * tau_i, accumulated in double and rounded once.
/// Elements whose accumulated delta is exactly zero keep the base bits.
inline Checkpoint linear_merge(const MergePlan& plan) {
  const Checkpoint& base = *plan.base;
  for (const auto& term : plan.terms) {
    if (!std::isfinite(term.coefficient)) {
      throw ValueError("merge coefficient must be finite, got " + format_real(term.coefficient));
    }
    require_compatible(base, term.vector->delta);
  }
  Checkpoint out;
  out.metadata() = base.metadata();
  for (const auto& [name, b] : base) {
    std::vector<float> v(b.values.size());
    std::vector<const float*> deltas;
    deltas.reserve(plan.terms.size());
    for (const auto& term : plan.terms) deltas.push_back(term.vector->delta.at(name).values.data());
    for (std::size_t i = 0; i < v.size(); ++i) {
      double acc = 0.0;
      for (std::size_t k = 0; k < deltas.size(); ++k) {
        acc += plan.terms[k].coefficient * static_cast<double>(deltas[k][i]);
      }
      v[i] = acc == 0.0 ? b.values[i] : static_cast<float>(b.values[i] + acc);
    }
    out.add(name, b.shape, std::move(v));
  }
  return out;
}

/// base + gamma * tau. Records gamma in the output metadata.
inline Checkpoint apply(const Checkpoint& base, const TaskVector& tv, double gamma) {
  if (!std::isfinite(gamma)) throw ValueError("gamma must be finite, got " + format_real(gamma));
  Checkpoint out = linear_merge(MergePlan{&base, {MergeTerm{&tv, gamma}}});
  out.metadata()["armap.gamma"] = format_real(gamma);
  return out;
}

// ---------------------------------------------------------------------------
// TIES

/// Per-element elected sign in {-1, 0, +1}, keyed like the task vectors.
struct SignMask {
  std::map<std::string, std::vector<std::int8_t>> tensors;
};

/// Number of elements ties_trim keeps out of `count`: ceil(retain * count).
/// A relative slack of 1e-9 absorbs representation error in the fraction,
/// so retain = 2/3 on 3 elements keeps 2.
inline std::size_t ties_keep_count(double retain, std::size_t count) {
  if (count == 0) return 0;
  const double exact = retain * static_cast<double>(count);
  auto k = static_cast<std::size_t>(std::ceil(exact - 1e-9 * exact));
  return std::clamp<std::size_t>(k, 1, count);
}

/// Keeps the ceil(retain * count) largest-magnitude elements of each tensor;
/// at equal magnitude the lower flat index wins.
inline TaskVector ties_trim(const TaskVector& tv, double retain) {
  if (!(retain > 0.0 && retain <= 1.0)) {
    throw ValueError("retain must lie in (0, 1], got " + format_real(retain));
  }
  TaskVector out;
  out.base_name = tv.base_name;
  out.target_name = tv.target_name;
  for (const auto& [name, t] : tv.delta) {
    const std::size_t n = t.values.size();
    const std::size_t keep = ties_keep_count(retain, n);
    std::vector<float> v(n, 0.0f);
    if (keep == n) {
      v = t.values;
    } else {
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                       [&](std::size_t a, std::size_t b) {
                         const float ma = std::fabs(t.values[a]);
                         const float mb = std::fabs(t.values[b]);
                         return ma != mb ? ma > mb : a < b;
                       });
      for (std::size_t j = 0; j < keep; ++j) v[order[j]] = t.values[order[j]];
    }
    out.delta.add(name, t.shape, std::move(v));
  }
  return out;
}

namespace detail {

inline void require_mutually_compatible(std::span<const TaskVector> tvs) {
  if (tvs.empty()) throw ValueError("need at least one task vector");
  for (std::size_t i = 1; i < tvs.size(); ++i) require_compatible(tvs[0].delta, tvs[i].delta);
}

inline std::int8_t sign_of(double x) { return x > 0 ? 1 : (x < 0 ? -1 : 0); }

inline SignMask elect_signs_unchecked(std::span<const TaskVector> tvs) {
  SignMask mask;
  for (const auto& [name, t] : tvs[0].delta) {
    std::vector<std::int8_t> s(t.values.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      double sum = 0.0;
      for (const auto& tv : tvs) sum += tv.delta.at(name).values[i];
      s[i] = sign_of(sum);
    }
    mask.tensors.emplace(name, std::move(s));
  }
  return mask;
}

}  // namespace detail

/// sgn of the elementwise sum; an exact zero sum elects 0.
inline SignMask ties_elect_sign(std::span<const TaskVector> tvs) {
  detail::require_mutually_compatible(tvs);
  return detail::elect_signs_unchecked(tvs);
}

/// Trim, elect, then average the trimmed values that agree with the elected
/// sign (disjoint mean); the result is scaled by lambda.
inline TaskVector ties_merge(std::span<const TaskVector> tvs, double retain, double lambda) {
  detail::require_mutually_compatible(tvs);
  if (!std::isfinite(lambda)) throw ValueError("lambda must be finite");
  std::vector<TaskVector> trimmed;
  trimmed.reserve(tvs.size());
  for (const auto& tv : tvs) trimmed.push_back(ties_trim(tv, retain));
  const SignMask mask = detail::elect_signs_unchecked(trimmed);

  TaskVector out;
  out.base_name = tvs[0].base_name;
  out.target_name = "ties";
  for (const auto& [name, signs] : mask.tensors) {
    const auto& shape = trimmed[0].delta.at(name).shape;
    std::vector<float> v(signs.size(), 0.0f);
    for (std::size_t i = 0; i < signs.size(); ++i) {
      if (signs[i] == 0) continue;
      double sum = 0.0;
      std::size_t count = 0;
      for (const auto& tv : trimmed) {
        const float x = tv.delta.at(name).values[i];
        if (detail::sign_of(x) == signs[i]) {
          sum += x;
          ++count;
        }
      }
      if (count > 0) v[i] = static_cast<float>(lambda * (sum / static_cast<double>(count)));
    }
    out.delta.add(name, shape, std::move(v));
  }
  return out;
}

// ---------------------------------------------------------------------------
// DARE

/// Uniform draw that decides whether element `index` of tensor `name` is
/// dropped. Keyed by (seed, name, index) only.
inline double dare_uniform(std::uint64_t seed, const std::string& name, std::uint64_t index) {
  return rng::Stream(seed, rng::fnv1a(name)).uniform(index);
}

/// Drops each element with probability p and rescales survivors by 1/(1-p).
inline TaskVector dare(const TaskVector& tv, double p, std::uint64_t seed) {
  if (!(p >= 0.0 && p < 1.0)) throw ValueError("drop probability p must lie in [0, 1), got " + format_real(p));
  TaskVector out;
  out.base_name = tv.base_name;
  out.target_name = tv.target_name;
  const double scale = 1.0 / (1.0 - p);
  for (const auto& [name, t] : tv.delta) {
    std::vector<float> v(t.values.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      const bool keep = dare_uniform(seed, name, i) >= p;
      v[i] = keep ? static_cast<float>(scale * t.values[i]) : 0.0f;
    }
    out.delta.add(name, t.shape, std::move(v));
  }
  return out;
}

}  // namespace armap
