#pragma once

#include <cmath>
#include <cstddef>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "epd/autodiff.hpp"
#include "epd/rng.hpp"
#include "epd/tensor.hpp"

namespace epd {

// One bivariate Gaussian per future timestep: (mux, muy, sigx, sigy, rho).
struct GaussStep {
  double mux = 0.0, muy = 0.0;
  double sigx = 1.0, sigy = 1.0;
  double rho = 0.0;
};

struct GaussianSeq {
  std::vector<GaussStep> steps;

  std::size_t horizon() const { return steps.size(); }

  bool valid() const {
    for (const GaussStep& s : steps) {
      if (!(s.sigx > 0.0) || !(s.sigy > 0.0)) return false;
      if (!(s.rho > -1.0) || !(s.rho < 1.0)) return false;
      if (!std::isfinite(s.mux) || !std::isfinite(s.muy) || !std::isfinite(s.sigx) ||
          !std::isfinite(s.sigy) || !std::isfinite(s.rho))
        return false;
    }
    return true;
  }

  void require_valid(const char* who) const {
    if (!valid()) throw NumericError(std::string(who) + ": invalid GaussianSeq");
  }
};

// Unconstrained layout per step: (mux, muy, log sigx, log sigy, atanh rho),
// flat [1, 5*T]. Gaussian noise on this vector always maps back to a valid
// distribution.
inline constexpr std::size_t kGaussParamsPerStep = 5;

// sigma = exp(s) + kSigmaFloor keeps the density bounded; rho = kRhoScale *
// tanh(r) stays strictly inside (-1, 1) even where tanh saturates to 1 in
// double precision (|r| >~ 19).
inline constexpr double kSigmaFloor = 1e-6;
inline constexpr double kRhoScale = 1.0 - 1e-9;

inline Tensor to_unconstrained(const GaussianSeq& d) {
  d.require_valid("to_unconstrained");
  Tensor u = Tensor::zeros(1, d.horizon() * kGaussParamsPerStep);
  for (std::size_t t = 0; t < d.horizon(); ++t) {
    const GaussStep& s = d.steps[t];
    u.data[5 * t + 0] = s.mux;
    u.data[5 * t + 1] = s.muy;
    u.data[5 * t + 2] = std::log(std::max(s.sigx - kSigmaFloor, 1e-300));
    u.data[5 * t + 3] = std::log(std::max(s.sigy - kSigmaFloor, 1e-300));
    u.data[5 * t + 4] = std::atanh(s.rho / kRhoScale);
  }
  return u;
}

inline GaussianSeq from_unconstrained(const Tensor& u) {
  if (!u.all_finite()) throw NumericError("from_unconstrained: non-finite input");
  if (u.numel() % kGaussParamsPerStep != 0)
    throw ShapeError("from_unconstrained: length " + std::to_string(u.numel()) +
                     " not a multiple of 5");
  GaussianSeq d;
  d.steps.resize(u.numel() / kGaussParamsPerStep);
  for (std::size_t t = 0; t < d.steps.size(); ++t) {
    GaussStep& s = d.steps[t];
    s.mux = u.data[5 * t + 0];
    s.muy = u.data[5 * t + 1];
    s.sigx = std::exp(u.data[5 * t + 2]) + kSigmaFloor;
    s.sigy = std::exp(u.data[5 * t + 3]) + kSigmaFloor;
    s.rho = kRhoScale * std::tanh(u.data[5 * t + 4]);
  }
  return d;
}

// Negative log-density of one bivariate Gaussian step at (dx, dy) from mean.
inline double nll_step(double dx, double dy, double sigx, double sigy, double rho) {
  const double omr2 = 1.0 - rho * rho;
  const double zx = dx / sigx, zy = dy / sigy;
  const double quad = zx * zx - 2.0 * rho * zx * zy + zy * zy;
  return std::log(2.0 * M_PI * sigx * sigy * std::sqrt(omr2)) + quad / (2.0 * omr2);
}

// Summed NLL of a trajectory [T,2] under the sequence.
inline double nll(const GaussianSeq& d, const Tensor& truth) {
  d.require_valid("nll");
  if (truth.rows() != d.horizon() || truth.cols() != 2)
    throw ShapeError("nll: trajectory " + truth.shape_str() + " vs horizon " +
                     std::to_string(d.horizon()));
  double total = 0.0;
  for (std::size_t t = 0; t < d.horizon(); ++t) {
    const GaussStep& s = d.steps[t];
    total += nll_step(truth.at(t, 0) - s.mux, truth.at(t, 1) - s.muy, s.sigx, s.sigy,
                      s.rho);
  }
  return total;
}

// Tape version of the same NLL, on the unconstrained parameterization.
// u is [1, 5T]; truth is a constant [T,2]. Gradients flow into u.
inline Var nll_unconstrained(Var u, const Tensor& truth) {
  Tape* tp = u.tape;
  const std::size_t T = truth.rows();
  if (u.value().numel() != T * kGaussParamsPerStep)
    throw ShapeError("nll_unconstrained: params " + u.value().shape_str() +
                     " vs horizon " + std::to_string(T));
  Var m = reshape(u, T, kGaussParamsPerStep);
  Var mux = slice_cols(m, 0, 1);
  Var muy = slice_cols(m, 1, 2);
  Var sigx = sadd(exp(slice_cols(m, 2, 3)), kSigmaFloor);
  Var sigy = sadd(exp(slice_cols(m, 3, 4)), kSigmaFloor);
  Var rho = smul(tanh(slice_cols(m, 4, 5)), kRhoScale);

  Tensor tx = Tensor::zeros(T, 1), ty = Tensor::zeros(T, 1);
  for (std::size_t t = 0; t < T; ++t) {
    tx.at(t, 0) = truth.at(t, 0);
    ty.at(t, 0) = truth.at(t, 1);
  }
  Var zx = div(sub(tp->constant(tx), mux), sigx);
  Var zy = div(sub(tp->constant(ty), muy), sigy);
  Var omr2 = sadd(neg(square(rho)), 1.0);
  Var quad = sub(add(square(zx), square(zy)), smul(mul(rho, mul(zx, zy)), 2.0));
  Var logdet = add(add(log(sigx), log(sigy)), smul(log(omr2), 0.5));
  Var per_step = add(sadd(logdet, std::log(2.0 * M_PI)), div(quad, smul(omr2, 2.0)));
  return sum(per_step);
}

// Correlated 2-D reparameterization, independent across timesteps.
inline Tensor sample_trajectory(const GaussianSeq& d, Rng& rng) {
  d.require_valid("sample");
  Tensor y = Tensor::zeros(d.horizon(), 2);
  for (std::size_t t = 0; t < d.horizon(); ++t) {
    const GaussStep& s = d.steps[t];
    const double z1 = rng.normal();
    const double z2 = rng.normal();
    y.at(t, 0) = s.mux + s.sigx * z1;
    y.at(t, 1) = s.muy + s.sigy * (s.rho * z1 + std::sqrt(1.0 - s.rho * s.rho) * z2);
  }
  return y;
}

inline std::vector<Tensor> sample(const GaussianSeq& d, std::size_t count, Rng& rng) {
  std::vector<Tensor> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) out.push_back(sample_trajectory(d, rng));
  return out;
}

// Differential entropy, summed over steps: log(2 pi e sx sy sqrt(1-rho^2)).
inline double entropy(const GaussianSeq& d) {
  double h = 0.0;
  for (const GaussStep& s : d.steps)
    h += std::log(2.0 * M_PI * M_E * s.sigx * s.sigy) +
         0.5 * std::log(1.0 - s.rho * s.rho);
  return h;
}

// CSV with columns (t, mux, muy, sigx, sigy, rho).
inline void write_gaussian_csv(const GaussianSeq& d, std::ostream& os) {
  os << "t,mux,muy,sigx,sigy,rho\n";
  os.precision(17);
  for (std::size_t t = 0; t < d.horizon(); ++t) {
    const GaussStep& s = d.steps[t];
    os << (t + 1) << ',' << s.mux << ',' << s.muy << ',' << s.sigx << ',' << s.sigy
       << ',' << s.rho << '\n';
  }
}

}  // namespace epd
