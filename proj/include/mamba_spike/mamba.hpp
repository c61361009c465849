#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "mamba_spike/error.hpp"
#include "mamba_spike/rng.hpp"
#include "mamba_spike/tensor.hpp"

namespace mamba_spike {

namespace detail {

struct ScanDims {
  std::size_t L, D, N;
};

inline ScanDims scan_check(const Tensor& x, const Tensor& delta, const Tensor& A, const Tensor& B,
                           const Tensor& C, const Tensor& D_skip) {
  if (x.rank() != 2) throw ShapeError("selective_scan: x must be [L x D], got " + shape_str(x.shape()));
  const std::size_t L = x.shape()[0], D = x.shape()[1];
  if (delta.shape() != Shape{L, D}) {
    throw ShapeError("selective_scan: delta " + shape_str(delta.shape()) + " must match x " +
                     shape_str(x.shape()));
  }
  if (A.rank() != 2 || A.shape()[0] != D) {
    throw ShapeError("selective_scan: A must be [D x N], got " + shape_str(A.shape()));
  }
  const std::size_t N = A.shape()[1];
  if (B.shape() != Shape{L, N} || C.shape() != Shape{L, N}) {
    throw ShapeError("selective_scan: B and C must be [L x N], got " + shape_str(B.shape()) +
                     " and " + shape_str(C.shape()));
  }
  if (D_skip.shape() != Shape{D}) {
    throw ShapeError("selective_scan: D_skip must be [D], got " + shape_str(D_skip.shape()));
  }
  for (double dv : delta.data()) {
    if (!(dv > 0.0)) throw ContractError("selective_scan: delta must be strictly positive");
  }
  return {L, D, N};
}

/// Reverse accumulation through the scan recurrence; shared by the reference
/// and chunked forward paths (both materialize the same state trace h).
inline std::function<void(Node&)> scan_backward(ScanDims dims, std::vector<double> htrace) {
  return [dims, htrace = std::move(htrace)](Node& self) {
    const std::size_t L = dims.L, D = dims.D, N = dims.N;
    Node& px = *self.parents[0];
    Node& pdelta = *self.parents[1];
    Node& pA = *self.parents[2];
    Node& pB = *self.parents[3];
    Node& pC = *self.parents[4];
    Node& pD = *self.parents[5];
    for (Node* p : {&px, &pdelta, &pA, &pB, &pC, &pD}) {
      if (p->requires_grad) ensure_grad(*p);
    }
    const double* xv = px.value.data();
    const double* dv = pdelta.value.data();
    const double* Av = pA.value.data();
    const double* Bv = pB.value.data();
    const double* Cv = pC.value.data();
    const double* Dv = pD.value.data();
    const double* gy = self.grad.data();
    std::vector<double> gh(D * N, 0.0);
    for (std::size_t t = L; t-- > 0;) {
      for (std::size_t d = 0; d < D; ++d) {
        const double g_out = gy[t * D + d];
        const double x_td = xv[t * D + d];
        const double dt_td = dv[t * D + d];
        if (px.requires_grad) px.grad[t * D + d] += Dv[d] * g_out;
        if (pD.requires_grad) pD.grad[d] += x_td * g_out;
        double gx_acc = 0.0;
        double gdt_acc = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
          const double h_t = htrace[(t * D + d) * N + n];
          double g = gh[d * N + n] + Cv[t * N + n] * g_out;
          if (pC.requires_grad) pC.grad[t * N + n] += h_t * g_out;
          const double ab = std::exp(dt_td * Av[d * N + n]);
          const double h_prev = t > 0 ? htrace[((t - 1) * D + d) * N + n] : 0.0;
          const double gab = g * h_prev;
          gdt_acc += gab * ab * Av[d * N + n] + g * Bv[t * N + n] * x_td;
          if (pA.requires_grad) pA.grad[d * N + n] += gab * ab * dt_td;
          if (pB.requires_grad) pB.grad[t * N + n] += g * dt_td * x_td;
          gx_acc += g * dt_td * Bv[t * N + n];
          gh[d * N + n] = g * ab;
        }
        if (px.requires_grad) px.grad[t * D + d] += gx_acc;
        if (pdelta.requires_grad) pdelta.grad[t * D + d] += gdt_acc;
      }
    }
  };
}

}  // namespace detail

/// Strictly sequential reference evaluation of the selective state-space
/// recurrence. Per channel d with state size N:
///   Abar[t] = exp(delta[t,d] * A[d,:])
///   h[t] = Abar[t] * h[t-1] + (delta[t,d] * B[t,:]) * x[t,d],  h[-1] = 0
///   y[t,d] = <C[t,:], h[t]> + D_skip[d] * x[t,d]
inline Tensor selective_scan_ref(const Tensor& x, const Tensor& delta, const Tensor& A,
                                 const Tensor& B, const Tensor& C, const Tensor& D_skip) {
  const auto dims = detail::scan_check(x, delta, A, B, C, D_skip);
  const std::size_t L = dims.L, D = dims.D, N = dims.N;
  const double* xv = x.data().data();
  const double* dv = delta.data().data();
  const double* Av = A.data().data();
  const double* Bv = B.data().data();
  const double* Cv = C.data().data();
  const double* Dv = D_skip.data().data();
  std::vector<double> htrace(L * D * N);
  std::vector<double> out(L * D);
  std::vector<double> h(D * N, 0.0);
  for (std::size_t t = 0; t < L; ++t) {
    for (std::size_t d = 0; d < D; ++d) {
      const double x_td = xv[t * D + d];
      const double dt_td = dv[t * D + d];
      double acc = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const double ab = std::exp(dt_td * Av[d * N + n]);
        const double h_new = ab * h[d * N + n] + dt_td * Bv[t * N + n] * x_td;
        h[d * N + n] = h_new;
        htrace[(t * D + d) * N + n] = h_new;
        acc += Cv[t * N + n] * h_new;
      }
      out[t * D + d] = acc + Dv[d] * x_td;
    }
  }
  const Tensor inputs[] = {x, delta, A, B, C, D_skip};
  return detail::make_op({L, D}, std::move(out), inputs,
                         detail::scan_backward(dims, std::move(htrace)));
}

/// Chunked evaluation of the same recurrence: the sequence is processed in
/// fixed-size chunks; inside a chunk the state is split into the carried-in
/// boundary state propagated by the running decay product plus a local scan
/// started from zero, so h[t] = prod(Abar[c0..t]) * h_carry + h_local[t].
/// Matches the reference within 1e-6 (bitwise for chunk >= L, where the carry
/// is exactly zero).
inline Tensor selective_scan_fast(const Tensor& x, const Tensor& delta, const Tensor& A,
                                  const Tensor& B, const Tensor& C, const Tensor& D_skip,
                                  std::size_t chunk = 16) {
  if (chunk == 0) throw ContractError("selective_scan_fast: chunk must be >= 1");
  const auto dims = detail::scan_check(x, delta, A, B, C, D_skip);
  const std::size_t L = dims.L, D = dims.D, N = dims.N;
  const double* xv = x.data().data();
  const double* dv = delta.data().data();
  const double* Av = A.data().data();
  const double* Bv = B.data().data();
  const double* Cv = C.data().data();
  const double* Dv = D_skip.data().data();
  std::vector<double> htrace(L * D * N);
  std::vector<double> carry(D * N, 0.0);
  for (std::size_t c0 = 0; c0 < L; c0 += chunk) {
    const std::size_t c1 = std::min(L, c0 + chunk);
    for (std::size_t d = 0; d < D; ++d) {
      for (std::size_t n = 0; n < N; ++n) {
        const double a = Av[d * N + n];
        const double carried = carry[d * N + n];
        double prod = 1.0;
        double hloc = 0.0;
        for (std::size_t t = c0; t < c1; ++t) {
          const double dt_td = dv[t * D + d];
          const double ab = std::exp(dt_td * a);
          prod *= ab;
          hloc = ab * hloc + dt_td * Bv[t * N + n] * xv[t * D + d];
          htrace[(t * D + d) * N + n] = prod * carried + hloc;
        }
        carry[d * N + n] = htrace[((c1 - 1) * D + d) * N + n];
      }
    }
  }
  std::vector<double> out(L * D);
  for (std::size_t t = 0; t < L; ++t) {
    for (std::size_t d = 0; d < D; ++d) {
      double acc = 0.0;
      for (std::size_t n = 0; n < N; ++n) acc += Cv[t * N + n] * htrace[(t * D + d) * N + n];
      out[t * D + d] = acc + Dv[d] * xv[t * D + d];
    }
  }
  const Tensor inputs[] = {x, delta, A, B, C, D_skip};
  return detail::make_op({L, D}, std::move(out), inputs,
                         detail::scan_backward(dims, std::move(htrace)));
}

// ---------------------------------------------------------------------------
// gated block
// ---------------------------------------------------------------------------

struct MambaBlockConfig {
  std::size_t dim = 64;        // D: model width
  std::size_t expansion = 2;   // E = expansion * D
  std::size_t state = 8;       // N: state size per channel
  std::size_t conv_width = 4;  // K: depthwise causal conv taps
  std::size_t dt_rank = 0;     // 0 selects max(1, E/16)
  double dt_min = 0.01;        // softplus(b_dt) initialization range
  double dt_max = 0.1;
  std::size_t chunk = 16;

  std::size_t inner() const { return expansion * dim; }
  std::size_t rank() const { return dt_rank > 0 ? dt_rank : std::max<std::size_t>(1, inner() / 16); }

  void validate() const {
    if (dim < 1 || expansion < 1 || state < 1 || conv_width < 1 || chunk < 1) {
      throw ContractError("MambaBlockConfig: dim, expansion, state, conv_width, chunk must be >= 1");
    }
    if (!(dt_min > 0.0) || dt_max < dt_min) {
      throw ContractError("MambaBlockConfig: need 0 < dt_min <= dt_max");
    }
  }
};

/// Parameters of one gated selective-SSM block over D channels expanded to E.
struct MambaBlockParams {
  MambaBlockConfig cfg;
  Tensor gain;       // [D] pre-norm scale
  Tensor w_v, w_g;   // [D x E] halves of the D -> 2E input projection
  Tensor conv_k;     // [K x E] depthwise causal conv taps
  Tensor a_log;      // [E x N]; A = -exp(a_log)
  Tensor w_b, w_c;   // [E x N]
  Tensor w_dt_down;  // [E x R]
  Tensor w_dt_up;    // [R x E]
  Tensor b_dt;       // [E]
  Tensor d_skip;     // [E]
  Tensor w_out;      // [E x D]

  static MambaBlockParams init(const MambaBlockConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t D = cfg.dim, E = cfg.inner(), N = cfg.state, K = cfg.conv_width;
    const std::size_t R = cfg.rank();
    auto uniform = [&rng](Shape shape, double bound) {
      std::vector<double> v(shape_size(shape));
      for (double& x : v) x = rng.uniform(-bound, bound);
      return Tensor::param(std::move(shape), std::move(v));
    };
    MambaBlockParams p;
    p.cfg = cfg;
    p.gain = Tensor::param_full({D}, 1.0);
    p.w_v = uniform({D, E}, std::sqrt(1.0 / static_cast<double>(D)));
    p.w_g = uniform({D, E}, std::sqrt(1.0 / static_cast<double>(D)));
    p.conv_k = uniform({K, E}, std::sqrt(1.0 / static_cast<double>(K)));
    {
      // negative integer ladder: A[e,n] = -(n+1)
      std::vector<double> v(E * N);
      for (std::size_t e = 0; e < E; ++e) {
        for (std::size_t n = 0; n < N; ++n) v[e * N + n] = std::log(static_cast<double>(n + 1));
      }
      p.a_log = Tensor::param({E, N}, std::move(v));
    }
    p.w_b = uniform({E, N}, std::sqrt(1.0 / static_cast<double>(E)));
    p.w_c = uniform({E, N}, std::sqrt(1.0 / static_cast<double>(E)));
    p.w_dt_down = uniform({E, R}, std::sqrt(1.0 / static_cast<double>(E)));
    p.w_dt_up = uniform({R, E}, std::sqrt(1.0 / static_cast<double>(R)));
    {
      // softplus(b_dt) lands log-uniformly in [dt_min, dt_max]
      std::vector<double> v(E);
      for (double& b : v) {
        const double dt = std::exp(rng.uniform(std::log(cfg.dt_min), std::log(cfg.dt_max)));
        b = dt > 20.0 ? dt : std::log(std::expm1(dt));
      }
      p.b_dt = Tensor::param({E}, std::move(v));
    }
    p.d_skip = Tensor::param_full({E}, 1.0);
    p.w_out = uniform({E, D}, std::sqrt(1.0 / static_cast<double>(E)));
    return p;
  }

  std::vector<Tensor> all() const {
    return {gain, w_v, w_g, conv_k, a_log, w_b, w_c, w_dt_down, w_dt_up, b_dt, d_skip, w_out};
  }

  std::vector<std::pair<std::string, Tensor>> named(const std::string& prefix) const {
    return {{prefix + ".gain", gain},           {prefix + ".w_v", w_v},
            {prefix + ".w_g", w_g},             {prefix + ".conv_k", conv_k},
            {prefix + ".a_log", a_log},         {prefix + ".w_b", w_b},
            {prefix + ".w_c", w_c},             {prefix + ".w_dt_down", w_dt_down},
            {prefix + ".w_dt_up", w_dt_up},     {prefix + ".b_dt", b_dt},
            {prefix + ".d_skip", d_skip},       {prefix + ".w_out", w_out}};
  }
};

/// One residual gated block:
///   u = rmsnorm(x); v = silu(conv(u W_v)); g = u W_g
///   B, C = v W_B, v W_C; delta = softplus(v W_dt_down W_dt_up + b_dt)
///   y = (scan(v, delta, -exp(A_log), B, C, D_skip) * silu(g)) W_out
///   out = x + y
inline Tensor mamba_block(const Tensor& x, const MambaBlockParams& p) {
  if (x.rank() != 2 || x.shape()[1] != p.cfg.dim) {
    throw ShapeError("mamba_block: input must be [L x " + std::to_string(p.cfg.dim) + "], got " +
                     shape_str(x.shape()));
  }
  Tensor u = rmsnorm(x, p.gain);
  Tensor v = silu(causal_depthwise_conv1d(matmul(u, p.w_v), p.conv_k));
  Tensor g = matmul(u, p.w_g);
  Tensor Bm = matmul(v, p.w_b);
  Tensor Cm = matmul(v, p.w_c);
  Tensor dt = softplus(add(matmul(matmul(v, p.w_dt_down), p.w_dt_up), p.b_dt));
  Tensor Am = neg(exp(p.a_log));
  Tensor s = selective_scan_fast(v, dt, Am, Bm, Cm, p.d_skip, p.cfg.chunk);
  Tensor y = matmul(mul(s, silu(g)), p.w_out);
  return add(x, y);
}

// ---------------------------------------------------------------------------
// stacked backbone with classification head
// ---------------------------------------------------------------------------

enum class HeadMode { kMeanPool, kLastStep };

struct BackboneConfig {
  std::size_t depth = 2;
  std::size_t classes = 4;
  MambaBlockConfig block;
  HeadMode head = HeadMode::kMeanPool;

  void validate() const {
    if (depth < 1) throw ContractError("BackboneConfig: depth must be >= 1");
    if (classes < 2) throw ContractError("BackboneConfig: need at least two classes");
    block.validate();
  }
};

struct BackboneParams {
  BackboneConfig cfg;
  std::vector<MambaBlockParams> blocks;
  Tensor head_w;  // [D x classes]
  Tensor head_b;  // [classes]

  static BackboneParams init(const BackboneConfig& cfg, Rng& rng) {
    cfg.validate();
    BackboneParams p;
    p.cfg = cfg;
    for (std::size_t i = 0; i < cfg.depth; ++i) {
      p.blocks.push_back(MambaBlockParams::init(cfg.block, rng));
    }
    const double bound = std::sqrt(1.0 / static_cast<double>(cfg.block.dim));
    std::vector<double> w(cfg.block.dim * cfg.classes);
    for (double& x : w) x = rng.uniform(-bound, bound);
    p.head_w = Tensor::param({cfg.block.dim, cfg.classes}, std::move(w));
    p.head_b = Tensor::param_full({cfg.classes}, 0.0);
    return p;
  }

  std::vector<std::pair<std::string, Tensor>> named(const std::string& prefix) const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      for (auto& nt : blocks[i].named(prefix + ".block" + std::to_string(i))) {
        out.push_back(std::move(nt));
      }
    }
    out.emplace_back(prefix + ".head_w", head_w);
    out.emplace_back(prefix + ".head_b", head_b);
    return out;
  }
};

/// Runs the block stack and the readout head; returns class logits [C].
/// Softmax is applied only inside the loss.
inline Tensor classify(const Tensor& seq, const BackboneParams& p) {
  if (seq.rank() != 2 || seq.shape()[1] != p.cfg.block.dim) {
    throw ShapeError("classify: input must be [L x " + std::to_string(p.cfg.block.dim) + "], got " +
                     shape_str(seq.shape()));
  }
  Tensor h = seq;
  for (const auto& blk : p.blocks) h = mamba_block(h, blk);
  Tensor readout;
  if (p.cfg.head == HeadMode::kMeanPool) {
    readout = pool_time(h, h.shape()[0], PoolMode::kMean);  // [1 x D]
  } else {
    readout = reshape(row(h, h.shape()[0] - 1), {1, p.cfg.block.dim});
  }
  return add(reshape(matmul(readout, p.head_w), {p.cfg.classes}), p.head_b);
}

}  // namespace mamba_spike
