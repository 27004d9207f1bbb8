#pragma once

#include <map>
#include <optional>
#include <string>

#include "lamo/autodiff.hpp"
#include "lamo/io.hpp"
#include "lamo/rng.hpp"
#include "lamo/ssm.hpp"

namespace lamo {

// The composed operator: pointwise lifting, latent encoder, a stack of gated
// multihead multidirectional SSM blocks acting on M latent tokens, latent
// decoder, pointwise projection.

enum class Directions { Uni, Bi, Multi4 };
enum class CoderMode { Learned, Patchify };

struct ModelConfig {
  int n_layers = 2;
  int embed_dim = 32;
  int latent_tokens = 64;
  int state_dim = 16;
  int heads = 1;
  int expand = 2;
  Directions directions = Directions::Multi4;
  int conv_width = 3;
  CoderMode coder_mode = CoderMode::Patchify;
  bool share_coders = false;
  bool normalize_latents = true;
  int grid_h = 0, grid_w = 0;      // physical grid; 0 = point cloud
  int latent_h = 0, latent_w = 0;  // latent grid; 0 = derive from config
  int in_channels = 1;
  int out_channels = 1;
  int coord_channels = 2;
  int fixed_points = 0;  // required in learned mode (decoder projects to N)
  ZohMode zoh_mode = ZohMode::Exact;
  bool skip_term = true;
  std::uint64_t seed = 0;

  bool has_grid() const { return grid_h > 0 && grid_w > 0; }
  int points() const { return has_grid() ? grid_h * grid_w : fixed_points; }
  int n_directions() const {
    return directions == Directions::Uni ? 1 : (directions == Directions::Bi ? 2 : 4);
  }
  int inner_dim() const { return embed_dim * expand; }
  int head_dim() const { return inner_dim() / heads; }

  void validate() const {
    if (n_layers < 1 || embed_dim < 1 || latent_tokens < 1 || state_dim < 1 || heads < 1)
      throw ContractError("config: layers/dims/tokens/state/heads must be positive");
    if (expand < 1) throw ContractError("config: expand factor must be >= 1");
    if (embed_dim % heads != 0) throw ContractError("config: embed_dim must be divisible by heads");
    if (conv_width < 0) throw ContractError("config: conv_width must be >= 0");
    if (directions == Directions::Multi4 && !has_grid())
      throw ContractError("config: multi4 directions require a grid");
    if (coder_mode == CoderMode::Patchify && !has_grid())
      throw ContractError("config: patchify coder requires a grid");
    if (coder_mode == CoderMode::Learned && fixed_points <= 0 && !has_grid())
      throw ContractError("config: learned coder requires fixed_points");
  }
};

/// Latent grid layout: M = mh x mw tokens, each covering a ph x pw patch of
/// the physical grid in patchify mode.
struct LatentGrid {
  Index mh = 1, mw = 1;
  Index ph = 1, pw = 1;
};

/// Token visit order over an h x w grid for scan direction 0..3:
/// 0 row-major from top-left, 1 its reverse, 2 row-major from the top-right
/// (columns reversed per row), 3 the reverse of 2.
inline std::vector<Index> direction_order(Index h, Index w, int direction) {
  const Index n = h * w;
  std::vector<Index> order(static_cast<std::size_t>(n));
  switch (direction) {
    case 0:
      for (Index k = 0; k < n; ++k) order[static_cast<std::size_t>(k)] = k;
      break;
    case 1:
      for (Index k = 0; k < n; ++k) order[static_cast<std::size_t>(k)] = n - 1 - k;
      break;
    case 2:
      for (Index r = 0; r < h; ++r)
        for (Index j = 0; j < w; ++j) order[static_cast<std::size_t>(r * w + j)] = r * w + (w - 1 - j);
      break;
    case 3:
      for (Index r = 0; r < h; ++r)
        for (Index j = 0; j < w; ++j)
          order[static_cast<std::size_t>(n - 1 - (r * w + j))] = r * w + (w - 1 - j);
      break;
    default:
      throw ContractError("direction_order: direction must be 0..3");
  }
  return order;
}

/// Picks the latent grid. Patchify mode needs exact tiling of the physical
/// grid; otherwise the most square factorization of M is used.
inline LatentGrid derive_latent_grid(const ModelConfig& cfg) {
  LatentGrid g;
  const Index M = cfg.latent_tokens;
  if (cfg.latent_h > 0 && cfg.latent_w > 0) {
    if (Index(cfg.latent_h) * cfg.latent_w != M)
      throw ContractError("config: latent grid does not hold latent_tokens tokens");
    g.mh = cfg.latent_h;
    g.mw = cfg.latent_w;
  } else if (cfg.coder_mode == CoderMode::Patchify) {
    Index best_mh = -1, best_score = -1;
    for (Index mh = 1; mh <= M; ++mh) {
      if (M % mh != 0) continue;
      const Index mw = M / mh;
      if (cfg.grid_h % mh != 0 || cfg.grid_w % mw != 0) continue;
      const Index ph = cfg.grid_h / mh, pw = cfg.grid_w / mw;
      const Index score = std::abs(ph - pw) * 10000 + std::abs(mh - mw);
      if (best_mh < 0 || score < best_score) {
        best_mh = mh;
        best_score = score;
      }
    }
    if (best_mh < 0)
      throw ContractError("config: no patch layout tiles " + std::to_string(cfg.grid_h) + "x" +
                          std::to_string(cfg.grid_w) + " with " + std::to_string(M) + " latent tokens");
    g.mh = best_mh;
    g.mw = M / best_mh;
  } else {
    Index mh = 1;
    for (Index d = 1; d * d <= M; ++d)
      if (M % d == 0) mh = d;
    g.mh = mh;
    g.mw = M / mh;
  }
  if (cfg.coder_mode == CoderMode::Patchify) {
    if (cfg.grid_h % g.mh != 0 || cfg.grid_w % g.mw != 0)
      throw ContractError("config: latent grid " + std::to_string(g.mh) + "x" + std::to_string(g.mw) +
                          " does not tile the physical grid");
    g.ph = cfg.grid_h / g.mh;
    g.pw = cfg.grid_w / g.mw;
  }
  return g;
}

/// Patch index of physical point i under a latent grid layout.
inline Index patch_of_point(Index i, Index grid_w, const LatentGrid& g) {
  const Index r = i / grid_w, c = i % grid_w;
  return (r / g.ph) * g.mw + (c / g.pw);
}

/// Per-patch mean pooling of point features: [N x C] -> [M x C].
template <class S>
Tensor<S> patchify_mean(const Tensor<S>& x, Index grid_h, Index grid_w, Index ph, Index pw) {
  if (grid_h % ph != 0 || grid_w % pw != 0)
    throw ContractError("patchify: grid " + std::to_string(grid_h) + "x" + std::to_string(grid_w) +
                        " not divisible by patch " + std::to_string(ph) + "x" + std::to_string(pw));
  if (x.shape[0] != grid_h * grid_w) throw ContractError("patchify: point count " + shape_str(x.shape));
  LatentGrid g{grid_h / ph, grid_w / pw, ph, pw};
  const Index M = g.mh * g.mw, C = x.shape[1];
  Tensor<S> z(Shape{M, C});
  for (Index i = 0; i < x.shape[0]; ++i) {
    const Index j = patch_of_point(i, grid_w, g);
    for (Index c = 0; c < C; ++c) z(j, c) += x(i, c);
  }
  const S inv = S(1) / static_cast<S>(ph * pw);
  arr_view(z) *= inv;
  return z;
}

/// Broadcast every latent back onto its patch: [M x C] -> [N x C].
template <class S>
Tensor<S> unpatchify(const Tensor<S>& z, Index grid_h, Index grid_w, Index ph, Index pw) {
  LatentGrid g{grid_h / ph, grid_w / pw, ph, pw};
  if (z.shape[0] != g.mh * g.mw) throw ContractError("unpatchify: latent count " + shape_str(z.shape));
  const Index C = z.shape[1];
  Tensor<S> x(Shape{grid_h * grid_w, C});
  for (Index i = 0; i < x.shape[0]; ++i) {
    const Index j = patch_of_point(i, grid_w, g);
    for (Index c = 0; c < C; ++c) x(i, c) = z(j, c);
  }
  return x;
}

// -------------------------------------------------------------------------
// Tape-level coder primitives
// -------------------------------------------------------------------------

/// Encoder core: row-softmax the logits into assignment weights W [N x M],
/// pool Z = W^T X, optionally dividing by the latent mass so latents are
/// weighted means (the one-hot limit then reproduces patch means).
template <class S>
Var<S> encode_from_logits(const Var<S>& X, const Var<S>& logits, bool normalize) {
  auto W = softmax(logits, 1);
  auto Z = matmul(transpose(W), X);
  if (!normalize) return Z;
  auto mass = add_scalar(col_sums(W), 1e-8);
  return scale_rows(Z, recip(mass));
}

/// Decoder core: column-softmax over the latent axis, so each physical point
/// receives a convex combination of latent tokens.
template <class S>
Var<S> decode_from_logits(const Var<S>& Z, const Var<S>& logits) {
  auto W = softmax(logits, 0);  // [M x N], normalized over latents per point
  return matmul(transpose(W), Z);
}

// -------------------------------------------------------------------------
// Parameter containers
// -------------------------------------------------------------------------

template <class S>
struct AffineVar {
  Var<S> w, b;
  Var<S> apply(const Var<S>& x) const { return add_bias(matmul(x, w), b); }
};

template <class S>
struct NormVar {
  Var<S> g, b;
};

template <class S>
struct SsmHeadVars {
  Var<S> a_log;      // [Ch x P]
  AffineVar<S> delta_proj;
  Var<S> delta_bias;  // [Ch]
  AffineVar<S> b_proj;
  AffineVar<S> c_proj;
  Var<S> skip;  // [Ch]; constant zeros when the direct term is disabled
};

template <class S>
struct DirectionVars {
  std::vector<Index> order;      // token visit order
  std::vector<Index> inv_order;  // scatter back
  AffineVar<S> conv;             // depthwise: w [K x E], b [E]; unused when conv_width = 0
  std::vector<SsmHeadVars<S>> heads;
};

template <class S>
struct BlockVars {
  NormVar<S> norm1, norm2;
  AffineVar<S> in_x, in_z;  // De -> E
  std::vector<DirectionVars<S>> dirs;
  AffineVar<S> out;          // E -> De
  AffineVar<S> mlp1, mlp2;   // De -> 2De -> De
};

template <class S>
struct CoderVars {
  AffineVar<S> enc;  // De -> M (learned)
  AffineVar<S> dec;  // De -> N (learned)
  Var<S> patch_enc_t;  // [M x N] constant mean-pool matrix (patchify)
  Var<S> patch_dec;    // [N x M] constant broadcast matrix (patchify)
  // per-patch-offset reconstruction head; identity-initialized so decode
  // starts as the exact broadcast, but sub-patch structure stays reachable
  Var<S> dec_offset_w;  // [ph*pw x De x De]
  Var<S> dec_offset_b;  // [ph*pw x De]
  std::vector<Index> offset_of_point;
};

template <class S>
class LamoModel {
 public:
  ModelConfig cfg;
  LatentGrid latent;

  explicit LamoModel(ModelConfig config) : cfg(std::move(config)) {
    cfg.validate();
    latent = derive_latent_grid(cfg);
    build();
  }

  const std::vector<std::pair<std::string, Var<S>>>& params() const { return params_; }
  Index param_count() const {
    Index n = 0;
    for (const auto& [name, v] : params_) n += v->value.size();
    return n;
  }

  void zero_grads() {
    for (auto& [name, v] : params_) v->zero_grad();
  }

  Var<S> encode(const Var<S>& X) const {
    if (cfg.coder_mode == CoderMode::Patchify) return matmul(coder_.patch_enc_t, X);
    return encode_from_logits(X, coder_.enc.apply(X), cfg.normalize_latents);
  }

  Var<S> decode(const Var<S>& Z) const {
    if (cfg.coder_mode == CoderMode::Patchify) {
      auto broadcast = matmul(coder_.patch_dec, Z);
      return grouped_affine(broadcast, coder_.dec_offset_w, coder_.dec_offset_b, coder_.offset_of_point);
    }
    return decode_from_logits(Z, coder_.dec.apply(Z));
  }

  /// Encoder assignment weights W [N x M] (learned mode).
  Var<S> encoder_weights(const Var<S>& X) const { return softmax(coder_.enc.apply(X), 1); }
  /// Decoder assignment weights W [M x N] (learned mode).
  Var<S> decoder_weights(const Var<S>& Z) const { return softmax(coder_.dec.apply(Z), 0); }

  /// The gated multidirectional multihead SSM applied to pre-normalized
  /// latent tokens.
  Var<S> latent_ssm(int layer, const Var<S>& Z) const {
    const BlockVars<S>& blk = blocks_[static_cast<std::size_t>(layer)];
    const Index E = cfg.inner_dim();
    const Index Ch = cfg.head_dim();
    auto Xh = blk.in_x.apply(Z);    // [M x E]
    auto gate = blk.in_z.apply(Z);  // [M x E]
    Var<S> sum_dirs;
    for (const auto& dir : blk.dirs) {
      auto Xd = gather_rows(Xh, dir.order);
      if (cfg.conv_width > 0) Xd = silu(depthwise_causal_conv(Xd, dir.conv.w, dir.conv.b));
      std::vector<Var<S>> head_outs;
      head_outs.reserve(dir.heads.size());
      for (int hidx = 0; hidx < cfg.heads; ++hidx) {
        const auto& head = dir.heads[static_cast<std::size_t>(hidx)];
        auto xh = cfg.heads == 1 ? Xd : slice_cols(Xd, hidx * Ch, (hidx + 1) * Ch);
        auto delta = softplus(add_bias(head.delta_proj.apply(xh), head.delta_bias));
        auto B = head.b_proj.apply(xh);
        auto C = head.c_proj.apply(xh);
        head_outs.push_back(selective_scan(delta, head.a_log, B, C, xh, head.skip, cfg.zoh_mode));
      }
      auto Yd = cfg.heads == 1 ? head_outs[0] : concat_cols(head_outs);
      Yd = gather_rows(Yd, dir.inv_order);
      sum_dirs = sum_dirs ? add(sum_dirs, Yd) : Yd;
    }
    auto gated = mul(sum_dirs, silu(gate));
    return blk.out.apply(gated);
  }

  /// Pre-norm residual block: SSM sub-layer then channel MLP.
  Var<S> latent_block(int layer, const Var<S>& Z) const {
    const BlockVars<S>& blk = blocks_[static_cast<std::size_t>(layer)];
    auto Zh = add(Z, latent_ssm(layer, layernorm(Z, blk.norm1.g, blk.norm1.b, kLnEps)));
    auto m = blk.mlp2.apply(silu(blk.mlp1.apply(layernorm(Zh, blk.norm2.g, blk.norm2.b, kLnEps))));
    return add(Zh, m);
  }

  Var<S> lift(const Var<S>& x_cat) const { return lift2_.apply(silu(lift1_.apply(x_cat))); }
  Var<S> project(const Var<S>& Y) const { return proj2_.apply(silu(proj1_.apply(Y))); }

  /// Full operator on one sample: x_phys [N x d_a], coords [N x d_coord].
  Var<S> forward(const Tensor<S>& x_phys, const Tensor<S>& coords) const {
    if (x_phys.rank() != 2 || x_phys.shape[1] != cfg.in_channels)
      throw ContractError("forward: input " + shape_str(x_phys.shape) + " vs " +
                          std::to_string(cfg.in_channels) + " channels");
    if (coords.shape != Shape{x_phys.shape[0], cfg.coord_channels})
      throw ContractError("forward: coords " + shape_str(coords.shape));
    if (x_phys.shape[0] != cfg.points())
      throw ContractError("forward: " + std::to_string(x_phys.shape[0]) + " points, model expects " +
                          std::to_string(cfg.points()));
    auto X = lift(constant(concat_cols<S>({x_phys, coords})));
    if (cfg.share_coders) {
      // re-encode from physical space in every block through the shared coder
      for (int l = 0; l < cfg.n_layers; ++l) X = decode(latent_block(l, encode(X)));
      return project(X);
    }
    auto Z = encode(X);
    for (int l = 0; l < cfg.n_layers; ++l) Z = latent_block(l, Z);
    return project(decode(Z));
  }

  static constexpr double kLnEps = 1e-5;

 private:
  Var<S> reg(const std::string& name, Tensor<S> t) {
    auto v = leaf(std::move(t), true);
    params_.emplace_back(name, v);
    return v;
  }

  AffineVar<S> reg_affine(const std::string& name, Index in, Index out, Rng& rng) {
    AffineVar<S> a;
    Tensor<S> w(Shape{in, out});
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    rng.fill_uniform(w, -bound, bound);
    a.w = reg(name + ".w", std::move(w));
    a.b = reg(name + ".b", Tensor<S>(Shape{out}));
    return a;
  }

  NormVar<S> reg_norm(const std::string& name, Index d) {
    return {reg(name + ".g", Tensor<S>(Shape{d}, S(1))), reg(name + ".b", Tensor<S>(Shape{d}))};
  }

  void build() {
    Rng rng(cfg.seed, 1);
    const Index De = cfg.embed_dim, E = cfg.inner_dim(), Ch = cfg.head_dim(), P = cfg.state_dim;
    const Index M = cfg.latent_tokens, N = cfg.points();

    lift1_ = reg_affine("lift1", cfg.in_channels + cfg.coord_channels, De, rng);
    lift2_ = reg_affine("lift2", De, De, rng);

    if (cfg.coder_mode == CoderMode::Learned) {
      coder_.enc = reg_affine("coder.enc", De, M, rng);
      coder_.dec = reg_affine("coder.dec", De, N, rng);
    } else {
      Tensor<S> enc_t(Shape{M, N});
      Tensor<S> dec(Shape{N, M});
      const S inv = S(1) / static_cast<S>(latent.ph * latent.pw);
      for (Index i = 0; i < N; ++i) {
        const Index j = patch_of_point(i, cfg.grid_w, latent);
        enc_t(j, i) = inv;
        dec(i, j) = S(1);
      }
      coder_.patch_enc_t = constant(std::move(enc_t));
      coder_.patch_dec = constant(std::move(dec));
      const Index G = latent.ph * latent.pw;
      Tensor<S> ow(Shape{G, De, De});
      for (Index o = 0; o < G; ++o)
        for (Index r = 0; r < De; ++r) ow[(o * De + r) * De + r] = S(1);
      coder_.dec_offset_w = reg("coder.dec_offset.w", std::move(ow));
      coder_.dec_offset_b = reg("coder.dec_offset.b", Tensor<S>(Shape{G, De}));
      coder_.offset_of_point.resize(static_cast<std::size_t>(N));
      for (Index i = 0; i < N; ++i) {
        const Index r = i / cfg.grid_w, col = i % cfg.grid_w;
        coder_.offset_of_point[static_cast<std::size_t>(i)] = (r % latent.ph) * latent.pw + (col % latent.pw);
      }
    }

    const bool latent_on_grid = cfg.directions == Directions::Multi4 ||
                                (cfg.has_grid() && cfg.coder_mode == CoderMode::Patchify);
    const Index lh = latent_on_grid ? latent.mh : 1;
    const Index lw = latent_on_grid ? latent.mw : M;
    blocks_.resize(static_cast<std::size_t>(cfg.n_layers));
    for (int l = 0; l < cfg.n_layers; ++l) {
      BlockVars<S>& blk = blocks_[static_cast<std::size_t>(l)];
      const std::string bp = "block" + std::to_string(l) + ".";
      blk.norm1 = reg_norm(bp + "norm1", De);
      blk.in_x = reg_affine(bp + "in_x", De, E, rng);
      blk.in_z = reg_affine(bp + "in_z", De, E, rng);
      blk.dirs.resize(static_cast<std::size_t>(cfg.n_directions()));
      for (int dd = 0; dd < cfg.n_directions(); ++dd) {
        DirectionVars<S>& dir = blk.dirs[static_cast<std::size_t>(dd)];
        dir.order = direction_order(lh, lw, dd);
        dir.inv_order = invert_permutation(dir.order);
        const std::string dp = bp + "dir" + std::to_string(dd) + ".";
        if (cfg.conv_width > 0) dir.conv = reg_affine(dp + "conv", cfg.conv_width, E, rng);
        dir.heads.resize(static_cast<std::size_t>(cfg.heads));
        for (int hh = 0; hh < cfg.heads; ++hh) {
          SsmHeadVars<S>& head = dir.heads[static_cast<std::size_t>(hh)];
          const std::string hp = dp + "head" + std::to_string(hh) + ".";
          auto seeded = init_ssm_params<S>(Ch, P, rng);
          head.a_log = reg(hp + "a_log", std::move(seeded.a_log));
          head.delta_proj.w = reg(hp + "delta.w", std::move(seeded.delta_proj.w));
          head.delta_proj.b = reg(hp + "delta.b", std::move(seeded.delta_proj.b));
          head.delta_bias = reg(hp + "delta_bias", std::move(seeded.delta_bias));
          head.b_proj.w = reg(hp + "b.w", std::move(seeded.b_proj.w));
          head.b_proj.b = reg(hp + "b.b", std::move(seeded.b_proj.b));
          head.c_proj.w = reg(hp + "c.w", std::move(seeded.c_proj.w));
          head.c_proj.b = reg(hp + "c.b", std::move(seeded.c_proj.b));
          head.skip = cfg.skip_term ? reg(hp + "skip", std::move(seeded.skip_gain))
                                    : constant(Tensor<S>(Shape{Ch}));
        }
      }
      blk.out = reg_affine(bp + "out", E, De, rng);
      blk.norm2 = reg_norm(bp + "norm2", De);
      blk.mlp1 = reg_affine(bp + "mlp1", De, 2 * De, rng);
      blk.mlp2 = reg_affine(bp + "mlp2", 2 * De, De, rng);
    }

    proj1_ = reg_affine("proj1", De, De, rng);
    proj2_ = reg_affine("proj2", De, cfg.out_channels, rng);
  }

  AffineVar<S> lift1_, lift2_, proj1_, proj2_;
  CoderVars<S> coder_;
  std::vector<BlockVars<S>> blocks_;
  std::vector<std::pair<std::string, Var<S>>> params_;
};

// -------------------------------------------------------------------------
// Config <-> key=value echo, checkpoint container
// -------------------------------------------------------------------------

inline std::string directions_name(Directions d) {
  return d == Directions::Uni ? "uni" : (d == Directions::Bi ? "bi" : "multi4");
}
inline Directions directions_from(const std::string& s) {
  if (s == "uni") return Directions::Uni;
  if (s == "bi") return Directions::Bi;
  if (s == "multi4") return Directions::Multi4;
  throw ContractError("unknown directions '" + s + "' (uni|bi|multi4)");
}
inline std::string coder_name(CoderMode m) { return m == CoderMode::Learned ? "learned" : "patchify"; }
inline CoderMode coder_from(const std::string& s) {
  if (s == "learned") return CoderMode::Learned;
  if (s == "patchify") return CoderMode::Patchify;
  throw ContractError("unknown coder_mode '" + s + "' (learned|patchify)");
}
inline std::string zoh_name(ZohMode m) { return m == ZohMode::Exact ? "exact" : "simplified"; }
inline ZohMode zoh_from(const std::string& s) {
  if (s == "exact") return ZohMode::Exact;
  if (s == "simplified") return ZohMode::Simplified;
  throw ContractError("unknown zoh_mode '" + s + "' (exact|simplified)");
}

inline std::string config_echo(const ModelConfig& c) {
  std::ostringstream os;
  os << "n_layers = " << c.n_layers << "\n";
  os << "embed_dim = " << c.embed_dim << "\n";
  os << "latent_tokens = " << c.latent_tokens << "\n";
  os << "state_dim = " << c.state_dim << "\n";
  os << "heads = " << c.heads << "\n";
  os << "expand = " << c.expand << "\n";
  os << "directions = " << directions_name(c.directions) << "\n";
  os << "conv_width = " << c.conv_width << "\n";
  os << "coder_mode = " << coder_name(c.coder_mode) << "\n";
  os << "share_coders = " << (c.share_coders ? 1 : 0) << "\n";
  os << "normalize_latents = " << (c.normalize_latents ? 1 : 0) << "\n";
  os << "grid_h = " << c.grid_h << "\n";
  os << "grid_w = " << c.grid_w << "\n";
  os << "latent_h = " << c.latent_h << "\n";
  os << "latent_w = " << c.latent_w << "\n";
  os << "in_channels = " << c.in_channels << "\n";
  os << "out_channels = " << c.out_channels << "\n";
  os << "coord_channels = " << c.coord_channels << "\n";
  os << "fixed_points = " << c.fixed_points << "\n";
  os << "zoh_mode = " << zoh_name(c.zoh_mode) << "\n";
  os << "skip_term = " << (c.skip_term ? 1 : 0) << "\n";
  os << "seed = " << c.seed << "\n";
  return os.str();
}

/// Applies one key to a config. Returns false for unknown keys.
inline bool config_set(ModelConfig& c, const std::string& key, const std::string& value) {
  auto as_int = [&] { return std::stoi(value); };
  auto as_u64 = [&] { return std::stoull(value); };
  if (key == "n_layers") c.n_layers = as_int();
  else if (key == "embed_dim") c.embed_dim = as_int();
  else if (key == "latent_tokens") c.latent_tokens = as_int();
  else if (key == "state_dim") c.state_dim = as_int();
  else if (key == "heads") c.heads = as_int();
  else if (key == "expand") c.expand = as_int();
  else if (key == "directions") c.directions = directions_from(value);
  else if (key == "conv_width") c.conv_width = as_int();
  else if (key == "coder_mode") c.coder_mode = coder_from(value);
  else if (key == "share_coders") c.share_coders = as_int() != 0;
  else if (key == "normalize_latents") c.normalize_latents = as_int() != 0;
  else if (key == "grid_h") c.grid_h = as_int();
  else if (key == "grid_w") c.grid_w = as_int();
  else if (key == "latent_h") c.latent_h = as_int();
  else if (key == "latent_w") c.latent_w = as_int();
  else if (key == "in_channels") c.in_channels = as_int();
  else if (key == "out_channels") c.out_channels = as_int();
  else if (key == "coord_channels") c.coord_channels = as_int();
  else if (key == "fixed_points") c.fixed_points = as_int();
  else if (key == "zoh_mode") c.zoh_mode = zoh_from(value);
  else if (key == "skip_term") c.skip_term = as_int() != 0;
  else if (key == "seed") c.seed = as_u64();
  else return false;
  return true;
}

inline std::vector<std::string> model_config_keys() {
  return {"n_layers", "embed_dim", "latent_tokens", "state_dim", "heads", "expand", "directions",
          "conv_width", "coder_mode", "share_coders", "normalize_latents", "grid_h", "grid_w",
          "latent_h", "latent_w", "in_channels", "out_channels", "coord_channels", "fixed_points",
          "zoh_mode", "skip_term", "seed"};
}

/// Parses "key = value" lines with '#' comments.
inline std::map<std::string, std::string> parse_kv_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    const auto b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ContractError("config line " + std::to_string(lineno) + ": expected key = value, got '" + line + "'");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline ModelConfig config_from_kv(const std::map<std::string, std::string>& kv) {
  ModelConfig c;
  for (const auto& [k, v] : kv)
    if (!config_set(c, k, v)) throw ContractError("unknown model config key '" + k + "'");
  return c;
}

constexpr char kCheckpointMagic[5] = "LMCK";

template <class S>
void save_model(const std::string& path, const LamoModel<S>& model) {
  ByteWriter w;
  w.str("LMCK");
  w.pod<std::uint32_t>(1);
  std::string echo = config_echo(model.cfg);
  echo += std::string("precision = ") + (std::is_same_v<S, float> ? "single" : "double") + "\n";
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(echo.size()));
  w.str(echo);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(model.params().size()));
  for (const auto& [name, v] : model.params()) {
    w.pod<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.str(name);
    write_ltns(w, v->value);
  }
  w.pod<std::uint32_t>(w.crc());
  w.save(path);
}

/// Reads the config echo of a checkpoint (no tensor payloads).
inline std::map<std::string, std::string> read_checkpoint_header(const std::string& path) {
  ByteReader r = ByteReader::from_file(path);
  r.expect_magic(kCheckpointMagic);
  const auto version = r.pod<std::uint32_t>();
  if (version != 1) throw IoError(path + ": unsupported checkpoint version " + std::to_string(version));
  const auto len = r.pod<std::uint32_t>();
  return parse_kv_text(r.str(len));
}

template <class S>
LamoModel<S> load_model(const std::string& path) {
  ByteReader r = ByteReader::from_file(path);
  r.expect_magic(kCheckpointMagic);
  const auto version = r.pod<std::uint32_t>();
  if (version != 1) throw IoError(path + ": unsupported checkpoint version " + std::to_string(version));
  const auto len = r.pod<std::uint32_t>();
  auto kv = parse_kv_text(r.str(len));
  const auto precision = kv.count("precision") ? kv.at("precision") : "single";
  kv.erase("precision");
  if (precision != (std::is_same_v<S, float> ? "single" : "double"))
    throw IoError(path + ": checkpoint precision is " + precision);
  LamoModel<S> model(config_from_kv(kv));
  const auto n = r.pod<std::uint32_t>();
  if (n != model.params().size())
    throw IoError(path + ": checkpoint has " + std::to_string(n) + " tensors, model expects " +
                  std::to_string(model.params().size()));
  for (const auto& [name, v] : model.params()) {
    const auto name_len = r.pod<std::uint16_t>();
    const std::string got = r.str(name_len);
    if (got != name) throw IoError(path + ": unexpected parameter '" + got + "' (want '" + name + "')");
    Tensor<S> t = read_ltns<S>(r);
    if (t.shape != v->value.shape) throw IoError(path + ": shape mismatch for '" + name + "'");
    v->value = std::move(t);
  }
  const std::size_t body = r.offset();
  const auto stored_crc = r.pod<std::uint32_t>();
  const auto computed = crc32_bytes(r.base(), body);
  if (stored_crc != computed)
    throw IoError(path + ": CRC mismatch (stored " + std::to_string(stored_crc) + ", computed " +
                  std::to_string(computed) + ")");
  return model;
}

}  // namespace lamo
