#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "epd/autodiff.hpp"
#include "epd/data.hpp"
#include "epd/gaussian.hpp"
#include "epd/params.hpp"
#include "epd/rng.hpp"

namespace epd {

// Energy-based plan model. A feed-forward energy over (plan, guidance) is
// sampled with Langevin dynamics seeded from a persistent replay buffer;
// positive/negative encoders map teacher and sampled plans into a shared
// feature space for the contrastive half of the loss.
struct EBMSpec {
  int z_dim = 60;   // matches the unconstrained parameter vector
  int g_dim = 256;
  int hidden = 256;
  int enc_hidden = 256;
  int feature = 60;
  int langevin_steps = 20;
  double langevin_eta = 0.1;
  double langevin_clip = 10.0;
  double fresh_prob = 0.05;
  int max_restarts = 100;
};

inline void add_sc_params(ParamStore& ps, const EBMSpec& spec, Rng& rng) {
  const int in = spec.z_dim + spec.g_dim;
  ps.add("sc.e1.w", glorot_init(in, spec.hidden, rng));
  ps.add("sc.e1.b", Tensor::zeros(1, spec.hidden));
  ps.add("sc.e2.w", glorot_init(spec.hidden, spec.hidden, rng));
  ps.add("sc.e2.b", Tensor::zeros(1, spec.hidden));
  ps.add("sc.e3.w", glorot_init(spec.hidden, 1, rng));
  ps.add("sc.e3.b", Tensor::zeros(1, 1));
  for (const char* side : {"sc.pos", "sc.neg"}) {
    const std::string p(side);
    ps.add(p + ".w1", glorot_init(in, spec.enc_hidden, rng));
    ps.add(p + ".b1", Tensor::zeros(1, spec.enc_hidden));
    ps.add(p + ".w2", glorot_init(spec.enc_hidden, spec.feature, rng));
    ps.add(p + ".b2", Tensor::zeros(1, spec.feature));
  }
}

// Scalar energy [1,1]. Tanh keeps it continuously differentiable, which the
// Langevin gradient needs everywhere.
inline Var sc_energy(Tape& t, const Binding& bind, const EBMSpec& spec, Var z, Var g) {
  if (t.value(z).cols() != static_cast<std::size_t>(spec.z_dim))
    throw ShapeError("sc: plan must have " + std::to_string(spec.z_dim) +
                     " columns, got " + t.value(z).shape_str());
  Var x = concat_cols(z, g);
  Var h1 = tanh(add_rowvec(matmul(x, bind["sc.e1.w"]), bind["sc.e1.b"]));
  Var h2 = tanh(add_rowvec(matmul(h1, bind["sc.e2.w"]), bind["sc.e2.b"]));
  return add_rowvec(matmul(h2, bind["sc.e3.w"]), bind["sc.e3.b"]);
}

// dE/dz written out as tape operations, so the Langevin update itself stays
// differentiable w.r.t. the network weights and the guidance.
inline Var sc_grad_energy_z(Tape& t, const Binding& bind, const EBMSpec& spec,
                            Var z, Var g) {
  Var x = concat_cols(z, g);
  Var h1 = tanh(add_rowvec(matmul(x, bind["sc.e1.w"]), bind["sc.e1.b"]));
  Var h2 = tanh(add_rowvec(matmul(h1, bind["sc.e2.w"]), bind["sc.e2.b"]));
  Var g2 = mul(sadd(neg(square(h2)), 1.0), transpose(bind["sc.e3.w"]));
  Var g1 = mul(sadd(neg(square(h1)), 1.0), matmul(g2, transpose(bind["sc.e2.w"])));
  Var dx = matmul(g1, transpose(bind["sc.e1.w"]));
  return slice_cols(dx, 0, static_cast<std::size_t>(spec.z_dim));
}

// Persistent plan store. Ring buffer, FIFO eviction once full; entry(0) is
// always the oldest surviving plan.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 1000) : cap_(capacity) {
    if (cap_ == 0) throw NumericError("replay buffer: capacity must be positive");
  }

  std::size_t capacity() const { return cap_; }
  std::size_t size() const { return size_; }
  bool empty() const { return size_ == 0; }
  std::uint64_t pushes() const { return pushes_; }

  void push(const Tensor& z) {
    for (double v : z.data)
      if (!std::isfinite(v))
        throw NumericError("replay buffer: refusing non-finite plan");
    if (ring_.size() < cap_) ring_.resize(cap_);
    ring_[(head_ + size_) % cap_] = z;
    if (size_ < cap_) ++size_;
    else head_ = (head_ + 1) % cap_;
    ++pushes_;
  }

  const Tensor& entry(std::size_t i) const {
    if (i >= size_) throw NumericError("replay buffer: entry out of range");
    return ring_[(head_ + i) % cap_];
  }

  const Tensor& sample(Rng& rng) const {
    if (empty()) throw NumericError("replay buffer: sample from empty buffer");
    return entry(static_cast<std::size_t>(rng.uniform_int(size_)));
  }

  void save(std::ostream& o) const {
    o.write("EPDRB1\n", 7);
    detail::put_u64(o, cap_);
    detail::put_u64(o, size_);
    detail::put_u64(o, head_);
    for (std::size_t i = 0; i < size_; ++i) detail::put_tensor(o, entry(i));
  }

  static ReplayBuffer load(std::istream& in) {
    char magic[7];
    in.read(magic, 7);
    if (!in || std::string(magic, 7) != "EPDRB1\n")
      throw DataError("replay buffer: bad magic");
    ReplayBuffer b(detail::get_u64(in));
    const std::uint64_t n = detail::get_u64(in);
    detail::get_u64(in);  // cursor is implied by the oldest-first dump
    if (n > b.cap_) throw DataError("replay buffer: size exceeds capacity");
    for (std::uint64_t i = 0; i < n; ++i) b.push(detail::get_tensor(in));
    if (!in) throw DataError("replay buffer: truncated");
    return b;
  }

 private:
  std::vector<Tensor> ring_;
  std::size_t cap_, head_ = 0, size_ = 0;
  std::uint64_t pushes_ = 0;
};

// Chain start: replay with probability 1 - fresh_prob when the buffer has
// anything, fresh unit Gaussian noise otherwise.
inline Tensor langevin_init(const EBMSpec& spec, const ReplayBuffer& buffer,
                            Rng& rng) {
  if (!buffer.empty() && rng.uniform() >= spec.fresh_prob) return buffer.sample(rng);
  return rng.normal_tensor(1, spec.z_dim);
}

using EnergyGrad = std::function<Var(Tape&, Var)>;

// Unrolled Langevin chain on the tape. The clip factor and the injected
// noise are constants of the graph; gradient flows through the dE/dz
// expression at every step. A non-finite state restarts the whole chain
// from fresh noise, counted in restarts.
inline Var langevin_chain_tape(Tape& t, const EBMSpec& spec, const Tensor& z0,
                               const EnergyGrad& grad_fn, Rng& rng, int& restarts) {
  if (z0.rows() != 1 || z0.cols() != static_cast<std::size_t>(spec.z_dim))
    throw ShapeError("langevin: start must be [1x" + std::to_string(spec.z_dim) +
                     "], got " + z0.shape_str());
  const double eta = spec.langevin_eta;
  int attempts = 0;
  for (;;) {
    Var z = t.constant(attempts == 0 ? z0 : rng.normal_tensor(1, spec.z_dim));
    bool diverged = false;
    for (int k = 0; k < spec.langevin_steps && !diverged; ++k) {
      Var gz = grad_fn(t, z);
      double norm = 0.0;
      for (double v : t.value(gz).data) norm += v * v;
      norm = std::sqrt(norm);
      double scale = 0.5 * eta;
      if (std::isfinite(norm) && norm > spec.langevin_clip)
        scale *= spec.langevin_clip / norm;
      Var noise = t.constant(rng.normal_tensor(1, spec.z_dim));
      z = add(sub(z, smul(gz, scale)), smul(noise, std::sqrt(eta)));
      for (double v : t.value(z).data)
        if (!std::isfinite(v)) {
          diverged = true;
          break;
        }
    }
    if (!diverged) return z;
    if (++attempts > spec.max_restarts)
      throw NumericError("langevin: chain still non-finite after " +
                         std::to_string(spec.max_restarts) + " restarts");
    ++restarts;
  }
}

inline Var langevin_chain_tape(Tape& t, const Binding& bind, const EBMSpec& spec,
                               const Tensor& z0, Var g, Rng& rng, int& restarts) {
  return langevin_chain_tape(
      t, spec, z0,
      [&bind, &spec, g](Tape& tp, Var z) {
        return sc_grad_energy_z(tp, bind, spec, z, g);
      },
      rng, restarts);
}

struct PlanResult {
  Tensor z;  // [1, z_dim]
  int restarts = 0;
};

// Value-only sampler: init from the buffer, run the chain, push the result
// back. One shared code path with the tape version.
inline PlanResult langevin_sample(const ParamStore& params, const EBMSpec& spec,
                                  const Tensor& g, ReplayBuffer& buffer, Rng& rng) {
  Tape t;
  Binding bind(t, params);
  PlanResult out;
  Var z = langevin_chain_tape(t, bind, spec, langevin_init(spec, buffer, rng),
                              t.constant(g), rng, out.restarts);
  out.z = z.value();
  buffer.push(out.z);
  return out;
}

// Positive/negative encoders share one architecture: affine, tanh, affine
// into the common feature space.
namespace detail {

inline Var sc_encode(Tape& t, const Binding& bind, const std::string& prefix,
                     Var in, Var g) {
  Var x = concat_cols(in, g);
  Var h = tanh(add_rowvec(matmul(x, bind[prefix + ".w1"]), bind[prefix + ".b1"]));
  return add_rowvec(matmul(h, bind[prefix + ".w2"]), bind[prefix + ".b2"]);
}

}  // namespace detail

inline Var sc_encode_positive(Tape& t, const Binding& bind, const EBMSpec&, Var u,
                              Var g) {
  return detail::sc_encode(t, bind, "sc.pos", u, g);
}

inline Var sc_encode_negative(Tape& t, const Binding& bind, const EBMSpec&, Var z,
                              Var g) {
  return detail::sc_encode(t, bind, "sc.neg", z, g);
}

struct ScLoss {
  Var total, mse_term, nll_term;
};

// Contrastive + likelihood loss. Both terms surfaced so training logs can
// report them separately.
inline ScLoss sc_loss(Var z_pos, Var z_neg, Var z, const Tensor& truth) {
  ScLoss out;
  out.mse_term = mse(z_pos, z_neg);
  out.nll_term = nll_unconstrained(z, truth);
  out.total = add(out.mse_term, out.nll_term);
  return out;
}

}  // namespace epd
