#pragma once
// Analytic multi-head attention cost model, counted in multiply-accumulates.
//
//   general:    N_Q N_K (D_Q + D_K) + 2 N_Q D_Q^2 + N_K D_K^2 + N_V D_V^2
//   simplified: 2 N_Q N_K D + 2 D^2 (N_Q + N_K)     (N_K = N_V, equal widths)
//
// Costs are exact unsigned 128-bit integers.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace bevx::flops {

using Wide = unsigned __int128;

inline std::string to_string(Wide v) {
  if (v == 0) return "0";
  std::string s;
  while (v > 0) {
    s.insert(s.begin(), static_cast<char>('0' + static_cast<int>(v % 10)));
    v /= 10;
  }
  return s;
}

inline Wide gcd(Wide a, Wide b) {
  while (b != 0) {
    const Wide t = a % b;
    a = b;
    b = t;
  }
  return a;
}

/// Non-negative rational, always reduced.
struct Fraction {
  Wide num = 0;
  Wide den = 1;

  static Fraction make(Wide n, Wide d) {
    if (d == 0) throw std::domain_error("fraction: zero denominator");
    const Wide g = gcd(n, d);
    return g == 0 ? Fraction{0, 1} : Fraction{n / g, d / g};
  }
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  friend bool operator==(const Fraction& a, const Fraction& b) { return a.num == b.num && a.den == b.den; }
  friend Fraction operator+(const Fraction& a, const Fraction& b) {
    return make(a.num * b.den + b.num * a.den, a.den * b.den);
  }
  friend Fraction operator*(const Fraction& a, const Fraction& b) { return make(a.num * b.num, a.den * b.den); }
};

struct AttentionDims {
  std::uint64_t n_q, n_k, n_v;
  std::uint64_t d_q, d_k, d_v;
};

inline void validate(const AttentionDims& d) {
  if (d.n_q == 0 || d.n_k == 0 || d.n_v == 0 || d.d_q == 0 || d.d_k == 0 || d.d_v == 0) {
    throw std::invalid_argument("attention dims: all token counts and widths must be positive");
  }
}

inline Wide ma_flops_general(const AttentionDims& d) {
  validate(d);
  const Wide nq = d.n_q, nk = d.n_k, nv = d.n_v, dq = d.d_q, dk = d.d_k, dv = d.d_v;
  return nq * nk * (dq + dk) + 2 * nq * dq * dq + nk * dk * dk + nv * dv * dv;
}

inline Wide ma_flops_simplified(std::uint64_t n_q, std::uint64_t n_k, std::uint64_t d) {
  if (n_q == 0 || n_k == 0 || d == 0) throw std::invalid_argument("ma_flops_simplified: dims must be positive");
  const Wide nq = n_q, nk = n_k, w = d;
  return 2 * nq * nk * w + 2 * w * w * (nq + nk);
}

/// One attention group: N_Q = query_fraction * H_M W_M, N_K = key_fraction * H_I W_I.
struct ScaleGroup {
  Fraction query_fraction;
  Fraction key_fraction;
};

struct ScaleGroupPlan {
  std::vector<ScaleGroup> groups;
  std::uint64_t width = 0;  // D
};

/// BEV level i (query side 1/8, 1/4, 1/2) paired with camera level 2-i
/// (key side 1/2, 1/4, 1/8).
inline ScaleGroupPlan cross_scale_plan(std::uint64_t width) {
  return {{{{1, 8}, {1, 2}}, {{1, 4}, {1, 4}}, {{1, 2}, {1, 8}}}, width};
}

/// Same-scale pairing of the conventional hierarchy.
inline ScaleGroupPlan aligned_plan(std::uint64_t width) {
  return {{{{1, 8}, {1, 8}}, {{1, 4}, {1, 4}}, {{1, 2}, {1, 2}}}, width};
}

struct MapSizes {
  std::uint64_t bev_h, bev_w;      // H_M, W_M
  std::uint64_t image_h, image_w;  // H_I, W_I
};

struct GroupCost {
  std::uint64_t n_q = 0;
  std::uint64_t n_k = 0;
  bool rounded = false;  // a fraction did not divide its token count exactly
  Wide flops = 0;
  Wide dominant = 0;  // 2 N_Q N_K D alone
};

struct PlanCost {
  std::vector<GroupCost> groups;
  Wide total = 0;
  Wide dominant = 0;
  /// Sum of 2 * q * k over groups: the coefficient of H_M W_M H_I W_I D.
  Fraction dominant_coefficient;
  bool rounded = false;
};

namespace detail {

inline std::uint64_t scaled_count(const Fraction& f, std::uint64_t n, bool& rounded) {
  const Wide prod = f.num * n;
  if (prod % f.den != 0) rounded = true;
  const Wide q = (2 * prod + f.den) / (2 * f.den);  // round half up
  if (q == 0) throw std::invalid_argument("plan_flops: a group rounds to zero tokens");
  return static_cast<std::uint64_t>(q);
}

}  // namespace detail

inline PlanCost plan_flops(const ScaleGroupPlan& plan, const MapSizes& s) {
  if (plan.width == 0 || plan.groups.empty()) throw std::invalid_argument("plan_flops: empty plan");
  if (s.bev_h == 0 || s.bev_w == 0 || s.image_h == 0 || s.image_w == 0) {
    throw std::invalid_argument("plan_flops: sizes must be positive");
  }
  PlanCost out;
  for (const auto& g : plan.groups) {
    if (g.query_fraction.num == 0 || g.key_fraction.num == 0) {
      throw std::invalid_argument("plan_flops: fractions must be positive");
    }
    GroupCost c;
    c.n_q = detail::scaled_count(g.query_fraction, s.bev_h * s.bev_w, c.rounded);
    c.n_k = detail::scaled_count(g.key_fraction, s.image_h * s.image_w, c.rounded);
    c.flops = ma_flops_simplified(c.n_q, c.n_k, plan.width);
    c.dominant = Wide{2} * c.n_q * c.n_k * plan.width;
    out.total += c.flops;
    out.dominant += c.dominant;
    out.rounded = out.rounded || c.rounded;
    out.dominant_coefficient = out.dominant_coefficient + Fraction::make(2, 1) * g.query_fraction * g.key_fraction;
    out.groups.push_back(c);
  }
  return out;
}

enum class SavingMode { Dominant, Full };

/// 1 - cost(a) / cost(b), exact. Negative savings are rejected since the
/// result is an unsigned fraction.
inline Fraction saving_ratio(const ScaleGroupPlan& a, const ScaleGroupPlan& b, const MapSizes& s, SavingMode mode) {
  const PlanCost ca = plan_flops(a, s);
  const PlanCost cb = plan_flops(b, s);
  const Wide num = mode == SavingMode::Dominant ? ca.dominant : ca.total;
  const Wide den = mode == SavingMode::Dominant ? cb.dominant : cb.total;
  if (den == 0) throw std::domain_error("saving_ratio: zero reference cost");
  if (num > den) throw std::domain_error("saving_ratio: plan a costs more than plan b");
  return Fraction::make(den - num, den);
}

}  // namespace bevx::flops
