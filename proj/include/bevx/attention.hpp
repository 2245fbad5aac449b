#pragma once
// Multi-view cross-attention with correspondence augmentation.
//
// Scores of every view are concatenated per query, then scaled by
// xi * sigma (sigma: standard deviation of the query's scores over the
// chosen extent) before the softmax. For xi * sigma > 1 this sharpens the
// distribution, for xi * sigma < 1 it flattens it; the argmax never moves.

#include <cmath>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "bevx/nn.hpp"
#include "bevx/tensor.hpp"

namespace bevx {

enum class AugMode {
  AllViewsAllTokens,  // sigma per (head, query) over all N_I*N_K scores
  PerView,            // sigma per (head, query, view) over N_K
  PerCameraToken,     // sigma per (head, query, key index) over N_I
  Off,
};

inline std::string_view to_string(AugMode m) {
  switch (m) {
    case AugMode::AllViewsAllTokens: return "all";
    case AugMode::PerView: return "per-view";
    case AugMode::PerCameraToken: return "per-token";
    case AugMode::Off: return "off";
  }
  return "?";
}

inline AugMode parse_aug_mode(std::string_view s) {
  if (s == "all") return AugMode::AllViewsAllTokens;
  if (s == "per-view") return AugMode::PerView;
  if (s == "per-token") return AugMode::PerCameraToken;
  if (s == "off") return AugMode::Off;
  throw std::invalid_argument("aug_mode: expected one of all, per-view, per-token, off; got '" +
                              std::string(s) + "'");
}

inline constexpr double kDefaultXi = 0.05;

struct AttentionBlock {
  std::size_t width = 0;
  std::size_t heads = 1;
  double xi = kDefaultXi;
  AugMode mode = AugMode::AllViewsAllTokens;
  Linear query;   // D -> D
  Linear key;     // D -> D
  Linear value;   // C_I -> D
  Linear output;  // D -> C_out
  LayerNorm norm;
  Mlp mlp;

  AttentionBlock() = default;
  AttentionBlock(std::size_t width_, std::size_t heads_, std::size_t value_channels,
                 std::size_t out_channels, double xi_, AugMode mode_, Rng& rng)
      : width(width_),
        heads(heads_),
        xi(xi_),
        mode(mode_),
        query(width_, width_, true, rng),
        key(width_, width_, true, rng),
        value(value_channels, width_, true, rng),
        output(width_, out_channels, true, rng),
        norm(out_channels),
        mlp(out_channels, 2 * out_channels, rng) {
    validate();
  }

  std::size_t head_width() const { return width / heads; }

  void validate() const {
    if (heads == 0 || width % heads != 0) {
      throw std::invalid_argument("attention block: width " + std::to_string(width) +
                                  " not divisible by head_count " + std::to_string(heads));
    }
    if (!(xi >= 0.0) || !std::isfinite(xi)) throw std::invalid_argument("attention block: xi must be >= 0");
  }

  void collect(const std::string& prefix, ParamList& out) {
    query.collect(prefix + ".query", out);
    key.collect(prefix + ".key", out);
    value.collect(prefix + ".value", out);
    output.collect(prefix + ".output", out);
    norm.collect(prefix + ".norm", out);
    mlp.collect(prefix + ".mlp", out);
  }
};

namespace detail {

/// [V, N, D] -> [H*V, N, Dh], head-major.
inline Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t v = x.dim(0), n = x.dim(1), d = x.dim(2);
  Tensor r = permute(reshape(x, {v, n, heads, d / heads}), {2, 0, 1, 3});
  return reshape(r, {heads * v, n, d / heads});
}

}  // namespace detail

/// queries: [N_I, N_Q, D]; keys: [N_I, N_K, D]. Returns A' as
/// [heads, N_Q, N_I*N_K] with views concatenated view-major.
inline Tensor raw_scores(const Tensor& queries, const Tensor& keys, const AttentionBlock& block) {
  const Shape& sq = queries.shape();
  const Shape& sk = keys.shape();
  if (sq.size() != 3 || sk.size() != 3 || sq[0] != sk[0] || sq[2] != block.width ||
      sk[2] != block.width) {
    throw ShapeError("raw_scores: queries " + shape_str(sq) + " keys " + shape_str(sk) +
                     " for width " + std::to_string(block.width));
  }
  const std::size_t nv = sq[0], nq = sq[1], nk = sk[1], h = block.heads;
  Tensor q = detail::split_heads(block.query(queries), h);
  Tensor kt = permute(detail::split_heads(block.key(keys), h), {0, 2, 1});
  Tensor s = scale(matmul(q, kt), 1.0 / std::sqrt(static_cast<double>(block.head_width())));
  s = permute(reshape(s, {h, nv, nq, nk}), {0, 2, 1, 3});
  return reshape(s, {h, nq, nv * nk});
}

/// A'' = xi * sigma * A' over the block's augmentation extent.
inline Tensor augment_scores(const Tensor& scores, const AttentionBlock& block, std::size_t n_views) {
  const Shape& s = scores.shape();
  if (s.size() != 3 || n_views == 0 || s[2] % n_views != 0) {
    throw ShapeError("augment_scores: scores " + shape_str(s) + " for " + std::to_string(n_views) +
                     " views");
  }
  if (block.mode == AugMode::Off) return scores;
  const std::size_t h = s[0], nq = s[1], nk = s[2] / n_views;
  if (block.mode == AugMode::AllViewsAllTokens) {
    return mul(scale(std_over(scores, {2}), block.xi), scores);
  }
  Tensor grouped = reshape(scores, {h, nq, n_views, nk});
  const std::size_t axis = block.mode == AugMode::PerView ? 3 : 2;
  Tensor out = mul(scale(std_over(grouped, {axis}), block.xi), grouped);
  return reshape(out, {h, nq, n_views * nk});
}

/// weights: [H, N_Q, L]; values: [L, D] already projected. Returns the
/// head-merged mixture [N_Q, D].
inline Tensor mix_values(const Tensor& weights, const Tensor& values, std::size_t heads) {
  const Shape& sw = weights.shape();
  const Shape& sv = values.shape();
  if (sw.size() != 3 || sv.size() != 2 || sw[0] != heads || sw[2] != sv[0] || sv[1] % heads != 0) {
    throw ShapeError("mix_values: weights " + shape_str(sw) + " values " + shape_str(sv));
  }
  const std::size_t l = sv[0], d = sv[1], nq = sw[1];
  Tensor v = permute(reshape(values, {l, heads, d / heads}), {1, 0, 2});
  Tensor o = matmul(weights, v);  // [H, N_Q, Dh]
  return reshape(permute(o, {1, 0, 2}), {nq, d});
}

struct AggregateResult {
  Tensor tokens;   // [N_Q, C_out]
  Tensor weights;  // [H, N_Q, N_I*N_K], softmax-normalized
};

/// Softmax over the concatenated view axis, value mixing, then
/// linear + normalization + MLP. `values`: [N_I, N_K, C_I], unembedded.
inline AggregateResult aggregate(const Tensor& augmented, const Tensor& values, const AttentionBlock& block) {
  const Shape& sv = values.shape();
  if (sv.size() != 3 || augmented.rank() != 3 || sv[0] * sv[1] != augmented.dim(2)) {
    throw ShapeError("aggregate: scores " + shape_str(augmented.shape()) + " values " + shape_str(sv));
  }
  Tensor w = softmax_lastaxis(augmented);
  Tensor v = block.value(reshape(values, {sv[0] * sv[1], sv[2]}));
  Tensor mixed = mix_values(w, v, block.heads);
  Tensor z = block.norm(block.output(mixed));
  return {add(z, block.mlp(z)), w};
}

struct CrossAttentionResult {
  Tensor raw;      // A'
  Tensor weights;  // softmax(A'')
  Tensor tokens;   // A (token form)
};

inline CrossAttentionResult cross_attend(const Tensor& queries, const Tensor& keys, const Tensor& values,
                                         const AttentionBlock& block) {
  Tensor raw = raw_scores(queries, keys, block);
  Tensor aug = augment_scores(raw, block, queries.dim(0));
  auto agg = aggregate(aug, values, block);
  return {raw, agg.weights, agg.tokens};
}

// ---------------------------------------------------------------------------
// Score distribution analysis.

struct ScoreRange {
  double lo;
  double hi;
};

struct ScoreHistogram {
  std::vector<ScoreRange> ranges;
  std::vector<std::uint64_t> conducive;
  std::vector<std::uint64_t> inconducive;

  explicit ScoreHistogram(std::vector<ScoreRange> r = {})
      : ranges(std::move(r)), conducive(ranges.size(), 0), inconducive(ranges.size(), 0) {}

  void merge(const ScoreHistogram& o) {
    if (o.ranges.size() != ranges.size()) throw std::invalid_argument("score histogram: range mismatch");
    for (std::size_t i = 0; i < ranges.size(); ++i) {
      conducive[i] += o.conducive[i];
      inconducive[i] += o.inconducive[i];
    }
  }
};

inline std::vector<ScoreRange> default_score_ranges() { return {{0.7, 1.0}, {0.1, 1.0}}; }

/// A view is front-facing iff its optical axis has a positive forward
/// component. A BEV cell is in the front half iff its x >= 0. A
/// (query, view) pair is conducive iff both sides agree.
/// Returns [N_Q * N_I] flags, query-major.
template <class Rig, class Grid>
std::vector<bool> conducive_partition(const Rig& rig, const Grid& grid) {
  const std::size_t nq = grid.rows * grid.cols;
  std::vector<bool> out(nq * rig.size());
  const auto c = grid.coords.data();
  for (std::size_t q = 0; q < nq; ++q) {
    const bool front_cell = c[2 * q] >= 0.0;
    for (std::size_t n = 0; n < rig.size(); ++n) {
      const bool front_view = rig.views[n].optical_axis().x() > 0.0;
      out[q * rig.size() + n] = front_cell == front_view;
    }
  }
  return out;
}

/// weights: [H, N_Q, N_I*N_K] softmax-normalized; every score is counted in
/// each closed range [lo, hi] containing it, under its pair's class.
inline ScoreHistogram score_histogram(const Tensor& weights, const std::vector<bool>& conducive,
                                      std::size_t n_views, const std::vector<ScoreRange>& ranges) {
  for (const auto& r : ranges) {
    if (!(r.lo >= 0.0 && r.hi <= 1.0 && r.lo <= r.hi)) {
      throw std::invalid_argument("score_histogram: range [" + std::to_string(r.lo) + "," +
                                  std::to_string(r.hi) + "] outside [0,1]");
    }
  }
  const Shape& s = weights.shape();
  if (s.size() != 3 || n_views == 0 || s[2] % n_views != 0 || conducive.size() != s[1] * n_views) {
    throw ShapeError("score_histogram: weights " + shape_str(s) + " with " +
                     std::to_string(conducive.size()) + " partition flags");
  }
  const std::size_t nq = s[1], nk = s[2] / n_views;
  ScoreHistogram hist(ranges);
  const auto d = weights.data();
  for (std::size_t h = 0; h < s[0]; ++h)
    for (std::size_t q = 0; q < nq; ++q)
      for (std::size_t n = 0; n < n_views; ++n) {
        const bool good = conducive[q * n_views + n];
        const double* row = d.data() + (h * nq + q) * s[2] + n * nk;
        for (std::size_t k = 0; k < nk; ++k)
          for (std::size_t i = 0; i < ranges.size(); ++i) {
            if (row[k] >= ranges[i].lo && row[k] <= ranges[i].hi) ++(good ? hist.conducive : hist.inconducive)[i];
          }
      }
  return hist;
}

}  // namespace bevx
