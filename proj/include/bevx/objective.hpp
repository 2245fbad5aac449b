#pragma once
// Sigmoid focal loss, the multi-scale supervision objective, and IoU.

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "bevx/nn.hpp"
#include "bevx/tensor.hpp"

namespace bevx {

struct LossWeights {
  std::array<double, 4> lambda = {1.0, 2.0, 2.0, 60.0};
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;

  void validate() const {
    bool any = false;
    for (double l : lambda) {
      if (!(l >= 0.0) || !std::isfinite(l)) throw std::invalid_argument("loss weights: lambda must be >= 0");
      any = any || l > 0.0;
    }
    if (!any) throw std::invalid_argument("loss weights: at least one lambda must be positive");
    if (!(focal_gamma >= 0.0)) throw std::invalid_argument("loss weights: focal_gamma must be >= 0");
    if (!(focal_alpha >= 0.0 && focal_alpha <= 1.0)) {
      throw std::invalid_argument("loss weights: focal_alpha must be in [0,1]");
    }
  }
};

namespace detail {

/// log(sigmoid(z)) without overflow.
inline double log_sigmoid(double z) { return z >= 0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z)); }

inline double sigmoid_scalar(double z) {
  return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

}  // namespace detail

/// Mean over cells of -alpha_t (1 - p_t)^gamma log(p_t), p = sigmoid(logit).
inline Tensor focal_loss(const Tensor& logits, const Tensor& target, double gamma, double alpha) {
  if (logits.shape() != target.shape()) {
    throw ShapeError("focal_loss: logits " + shape_str(logits.shape()) + " vs target " +
                     shape_str(target.shape()));
  }
  if (logits.size() == 0) throw ShapeError("focal_loss: empty input");
  const auto z = logits.data();
  const auto y = target.data();
  for (double t : y) {
    if (t != 0.0 && t != 1.0) throw std::invalid_argument("focal_loss: target values must be 0 or 1");
  }
  const double n = static_cast<double>(z.size());
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    // Positive cells see z, negative cells see -z with alpha_t = 1 - alpha.
    const double s = y[i] == 1.0 ? z[i] : -z[i];
    const double a = y[i] == 1.0 ? alpha : 1.0 - alpha;
    const double one_minus_pt = detail::sigmoid_scalar(-s);
    total += -a * std::pow(one_minus_pt, gamma) * detail::log_sigmoid(s);
  }
  std::vector<double> ycopy(y.begin(), y.end());
  return detail::make_result("focal_loss", {}, {total / n}, {&logits},
                             [gamma, alpha, n, ycopy = std::move(ycopy)](detail::Node& self) {
                               detail::Node& p = detail::parent(self, 0);
                               if (!p.requires_grad) return;
                               auto& g = p.ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 const bool pos = ycopy[i] == 1.0;
                                 const double s = pos ? p.data[i] : -p.data[i];
                                 const double a = pos ? alpha : 1.0 - alpha;
                                 const double pt = detail::sigmoid_scalar(s);
                                 const double q = 1.0 - pt;
                                 // d/ds of -a q^gamma log(pt), with dpt/ds = pt q
                                 const double dq_pow = gamma == 0.0 ? 0.0 : gamma * std::pow(q, gamma) * pt;
                                 const double ds = a * (dq_pow * detail::log_sigmoid(s) - std::pow(q, gamma + 1.0));
                                 g[i] += self.grad[0] * (pos ? ds : -ds) / n;
                               }
                             });
}

/// Maps one BEV level [1, C, h, w] to final-size logits [1, C_M, H_M, W_M].
struct AuxHead {
  Conv2d conv;
  std::size_t out_h = 0;
  std::size_t out_w = 0;

  AuxHead() = default;
  AuxHead(std::size_t in_channels, std::size_t classes, std::size_t out_h_, std::size_t out_w_, Rng& rng)
      : conv(in_channels, classes, 3, 1, rng), out_h(out_h_), out_w(out_w_) {}

  Tensor operator()(const Tensor& bev) const { return resize_bilinear(conv(bev), out_h, out_w); }

  void collect(const std::string& prefix, ParamList& out) { conv.collect(prefix, out); }
};

struct LossBreakdown {
  Tensor total;
  std::array<double, 4> branch{};  // unweighted focal loss per branch
};

/// L = sum_i lambda_i F[f(B_i), M~] + lambda_3 F(M, M~). `aux_logits` are
/// the already-projected f(B_i); all tensors share the target's shape.
inline LossBreakdown total_loss(const std::vector<Tensor>& aux_logits, const Tensor& logits, const Tensor& target,
                                const LossWeights& w) {
  if (aux_logits.size() != 3) {
    throw std::invalid_argument("total_loss: expected 3 intermediate levels, got " +
                                std::to_string(aux_logits.size()));
  }
  LossBreakdown out;
  Tensor final_loss = focal_loss(logits, target, w.focal_gamma, w.focal_alpha);
  out.branch[3] = final_loss.item();
  Tensor total = scale(final_loss, w.lambda[3]);
  for (std::size_t i = 0; i < 3; ++i) {
    Tensor li = focal_loss(aux_logits[i], target, w.focal_gamma, w.focal_alpha);
    out.branch[i] = li.item();
    total = add(total, scale(li, w.lambda[i]));
  }
  out.total = total;
  return out;
}

struct IouCounts {
  std::uint64_t intersection = 0;
  std::uint64_t union_ = 0;

  double value() const {
    return union_ == 0 ? 1.0 : static_cast<double>(intersection) / static_cast<double>(union_);
  }
  IouCounts& operator+=(const IouCounts& o) {
    intersection += o.intersection;
    union_ += o.union_;
    return *this;
  }
};

/// Predicted cell = sigmoid(logit) > threshold; ground truth cell = target > 0.5.
inline IouCounts iou_counts(std::span<const double> logits, std::span<const double> target, double threshold = 0.5) {
  if (logits.size() != target.size()) throw ShapeError("iou: prediction and target sizes differ");
  IouCounts c;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const bool p = detail::sigmoid_scalar(logits[i]) > threshold;
    const bool g = target[i] > 0.5;
    c.intersection += p && g;
    c.union_ += p || g;
  }
  return c;
}

inline double iou(const Tensor& logits, const Tensor& target, double threshold = 0.5) {
  if (logits.shape() != target.shape()) {
    throw ShapeError("iou: prediction " + shape_str(logits.shape()) + " vs target " + shape_str(target.shape()));
  }
  return iou_counts(logits.data(), target.data(), threshold).value();
}

}  // namespace bevx
