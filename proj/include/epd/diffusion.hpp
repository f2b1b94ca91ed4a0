#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "epd/autodiff.hpp"
#include "epd/gaussian.hpp"
#include "epd/params.hpp"
#include "epd/rng.hpp"

namespace epd {

// Linear noise schedule. Levels are 1-based to match the step indices in
// the math; level 0 is the clean state.
struct DiffusionSchedule {
  std::vector<double> betas;       // betas[i] is beta at level i+1
  std::vector<double> alphas;      // 1 - beta
  std::vector<double> alpha_bars;  // running product of alphas

  int t_count() const { return static_cast<int>(betas.size()); }

  void require_level(int t, const char* who) const {
    if (t < 1 || t > t_count())
      throw NumericError(std::string(who) + ": level " + std::to_string(t) +
                         " outside [1," + std::to_string(t_count()) + "]");
  }
  double beta(int t) const {
    require_level(t, "schedule beta");
    return betas[t - 1];
  }
  double alpha(int t) const {
    require_level(t, "schedule alpha");
    return alphas[t - 1];
  }
  double alpha_bar(int t) const {
    require_level(t, "schedule alpha_bar");
    return alpha_bars[t - 1];
  }
};

inline DiffusionSchedule make_schedule(int t_count = 100, double beta_lo = 1e-4,
                                       double beta_hi = 0.2) {
  if (t_count < 2)
    throw NumericError("make_schedule: need at least 2 levels, got " +
                       std::to_string(t_count));
  if (!(beta_lo > 0.0) || !(beta_hi < 1.0) || !(beta_lo < beta_hi))
    throw NumericError("make_schedule: need 0 < beta_lo < beta_hi < 1, got " +
                       std::to_string(beta_lo) + ", " + std::to_string(beta_hi));
  DiffusionSchedule s;
  double running = 1.0;
  for (int i = 0; i < t_count; ++i) {
    const double b = beta_lo + (beta_hi - beta_lo) * i / (t_count - 1);
    s.betas.push_back(b);
    s.alphas.push_back(1.0 - b);
    running *= 1.0 - b;
    s.alpha_bars.push_back(running);
  }
  return s;
}

namespace detail {

inline Tensor forward_sample_abar(const Tensor& d0, double abar, const Tensor& eps) {
  require_same_shape(d0, eps, "forward_sample");
  Tensor out = d0;
  const double a = std::sqrt(abar), b = std::sqrt(1.0 - abar);
  for (std::size_t i = 0; i < out.numel(); ++i)
    out.data[i] = a * d0.data[i] + b * eps.data[i];
  return out;
}

}  // namespace detail

// Closed-form marginal of the forward chain at level t.
inline Tensor forward_sample(const Tensor& d0, int t, const Tensor& eps,
                             const DiffusionSchedule& sch) {
  sch.require_level(t, "forward_sample");
  return detail::forward_sample_abar(d0, sch.alpha_bar(t), eps);
}

// Sinusoidal level embedding [1, dim]; dim must be even.
inline Tensor time_embedding(int t, int dim = 64) {
  if (dim < 2 || dim % 2 != 0)
    throw ShapeError("time_embedding: dim must be even and positive");
  Tensor out = Tensor::zeros(1, dim);
  for (int i = 0; i < dim / 2; ++i) {
    const double freq = std::pow(10000.0, -2.0 * i / dim);
    out.at(0, 2 * i) = std::sin(t * freq);
    out.at(0, 2 * i + 1) = std::cos(t * freq);
  }
  return out;
}

// Noise-prediction network: the state becomes t_future tokens of width 5,
// each lifted to d_model and summed with a learned position row plus level
// and guidance projections; two post-norm self-attention blocks; a
// per-token head maps back to the 60 unconstrained parameters.
struct DenoiserSpec {
  int t_future = 12;
  int token_dim = 5;
  int d_model = 64;
  int time_dim = 64;
  int g_dim = 256;
  int n_layers = 2;

  int z_dim() const { return t_future * token_dim; }
};

inline void add_pd_params(ParamStore& ps, const DenoiserSpec& spec, Rng& rng) {
  const int dm = spec.d_model;
  ps.add("pd.in.w", glorot_init(spec.token_dim, dm, rng));
  ps.add("pd.in.b", Tensor::zeros(1, dm));
  ps.add("pd.pos", glorot_init(spec.t_future, dm, rng));
  ps.add("pd.time.w", glorot_init(spec.time_dim, dm, rng));
  ps.add("pd.time.b", Tensor::zeros(1, dm));
  ps.add("pd.g.w", glorot_init(spec.g_dim, dm, rng));
  ps.add("pd.g.b", Tensor::zeros(1, dm));
  Tensor ones = Tensor::zeros(1, dm);
  for (double& v : ones.data) v = 1.0;
  for (int l = 0; l < spec.n_layers; ++l) {
    const std::string p = "pd.l" + std::to_string(l);
    for (const char* w : {".wq", ".wk", ".wv", ".wo"})
      ps.add(p + w, glorot_init(dm, dm, rng));
    ps.add(p + ".ln1.g", ones);
    ps.add(p + ".ln1.b", Tensor::zeros(1, dm));
    ps.add(p + ".ff1.w", glorot_init(dm, 2 * dm, rng));
    ps.add(p + ".ff1.b", Tensor::zeros(1, 2 * dm));
    ps.add(p + ".ff2.w", glorot_init(2 * dm, dm, rng));
    ps.add(p + ".ff2.b", Tensor::zeros(1, dm));
    ps.add(p + ".ln2.g", ones);
    ps.add(p + ".ln2.b", Tensor::zeros(1, dm));
  }
  ps.add("pd.head.w", glorot_init(dm, spec.token_dim, rng));
  ps.add("pd.head.b", Tensor::zeros(1, spec.token_dim));
}

inline Var pd_predict_noise(Tape& t, const Binding& bind, const DenoiserSpec& spec,
                            Var d, int level, Var g) {
  if (t.value(d).numel() != static_cast<std::size_t>(spec.z_dim()))
    throw ShapeError("pd: state must have " + std::to_string(spec.z_dim()) +
                     " entries, got " + t.value(d).shape_str());
  Var tokens = reshape(d, spec.t_future, spec.token_dim);
  Var x = add_rowvec(matmul(tokens, bind["pd.in.w"]), bind["pd.in.b"]);
  x = add(x, bind["pd.pos"]);
  Var tvec = add_rowvec(matmul(t.constant(time_embedding(level, spec.time_dim)),
                               bind["pd.time.w"]),
                        bind["pd.time.b"]);
  Var gvec = add_rowvec(matmul(g, bind["pd.g.w"]), bind["pd.g.b"]);
  x = add_rowvec(add_rowvec(x, tvec), gvec);

  const double scale = 1.0 / std::sqrt(static_cast<double>(spec.d_model));
  for (int l = 0; l < spec.n_layers; ++l) {
    const std::string p = "pd.l" + std::to_string(l);
    Var q = matmul(x, bind[p + ".wq"]);
    Var k = matmul(x, bind[p + ".wk"]);
    Var v = matmul(x, bind[p + ".wv"]);
    Var attn = matmul(softmax(smul(matmul(q, transpose(k)), scale), 1), v);
    x = layer_norm(add(x, matmul(attn, bind[p + ".wo"])), bind[p + ".ln1.g"],
                   bind[p + ".ln1.b"]);
    Var h = tanh(add_rowvec(matmul(x, bind[p + ".ff1.w"]), bind[p + ".ff1.b"]));
    Var f = add_rowvec(matmul(h, bind[p + ".ff2.w"]), bind[p + ".ff2.b"]);
    x = layer_norm(add(x, f), bind[p + ".ln2.g"], bind[p + ".ln2.b"]);
  }
  Var eps = add_rowvec(matmul(x, bind["pd.head.w"]), bind["pd.head.b"]);
  return reshape(eps, 1, spec.z_dim());
}

inline Tensor predict_noise(const ParamStore& params, const DenoiserSpec& spec,
                            const Tensor& d, int level, const Tensor& g) {
  Tape t;
  Binding bind(t, params);
  return pd_predict_noise(t, bind, spec, t.constant(d), level, t.constant(g)).value();
}

// Posterior-mean reverse step as pure algebra: the caller supplies the noise
// prediction and the injected noise (zeros for the final step to level 0).
inline Tensor reverse_step_math(const Tensor& d_next, const Tensor& eps_hat,
                                int t_next, const DiffusionSchedule& sch,
                                const Tensor& xi) {
  sch.require_level(t_next, "reverse_step");
  require_same_shape(d_next, eps_hat, "reverse_step");
  require_same_shape(d_next, xi, "reverse_step");
  const double c1 = 1.0 / std::sqrt(sch.alpha(t_next));
  const double c2 = sch.beta(t_next) / std::sqrt(1.0 - sch.alpha_bar(t_next));
  const double sigma = std::sqrt(sch.beta(t_next));
  Tensor out = d_next;
  for (std::size_t i = 0; i < out.numel(); ++i)
    out.data[i] = c1 * (d_next.data[i] - c2 * eps_hat.data[i]) + sigma * xi.data[i];
  return out;
}

// One reverse step on the tape. Noise is a constant of the graph and is
// omitted on the final step down to level 0.
inline Var reverse_step_tape(Tape& t, const Binding& bind, const DenoiserSpec& spec,
                             Var d_next, int t_next, Var g,
                             const DiffusionSchedule& sch, Rng& rng) {
  sch.require_level(t_next, "reverse_step");
  Var eps_hat = pd_predict_noise(t, bind, spec, d_next, t_next, g);
  const double c1 = 1.0 / std::sqrt(sch.alpha(t_next));
  const double c2 = sch.beta(t_next) / std::sqrt(1.0 - sch.alpha_bar(t_next));
  const double sigma = std::sqrt(sch.beta(t_next));
  Var mean = smul(sub(d_next, smul(eps_hat, c2)), c1);
  if (t_next == 1) return mean;
  Tensor xi = rng.normal_tensor(1, spec.z_dim());
  for (double& v : xi.data) v *= sigma;
  return add(mean, t.constant(xi));
}

inline Tensor reverse_step(const ParamStore& params, const DenoiserSpec& spec,
                           const Tensor& d_next, int t_next, const Tensor& g,
                           const DiffusionSchedule& sch, Rng& rng) {
  Tape t;
  Binding bind(t, params);
  return reverse_step_tape(t, bind, spec, t.constant(d_next), t_next,
                           t.constant(g), sch, rng)
      .value();
}

struct InvocationCounter {
  std::atomic<long> count{0};
};

// Truncated reverse chain: the plan is treated as the state at level
// t_prime and walked down to level 0 with exactly t_prime denoiser calls,
// however many trajectories are sampled from the result afterwards.
inline Var truncated_denoise_tape(Tape& t, const Binding& bind,
                                  const DenoiserSpec& spec, Var plan, Var g,
                                  const DiffusionSchedule& sch, int t_prime,
                                  Rng& rng, InvocationCounter* counter = nullptr) {
  if (t_prime < 0 || t_prime > sch.t_count())
    throw NumericError("truncated denoise: t' " + std::to_string(t_prime) +
                       " outside [0," + std::to_string(sch.t_count()) + "]");
  Var d = plan;
  for (int level = t_prime; level >= 1; --level) {
    d = reverse_step_tape(t, bind, spec, d, level, g, sch, rng);
    if (counter) counter->count.fetch_add(1, std::memory_order_relaxed);
    for (double v : t.value(d).data)
      if (!std::isfinite(v))
        throw NumericError("truncated denoise: non-finite state at level " +
                           std::to_string(level - 1));
  }
  return d;
}

inline GaussianSeq truncated_denoise(const ParamStore& params,
                                     const DenoiserSpec& spec, const Tensor& plan,
                                     const Tensor& g, const DiffusionSchedule& sch,
                                     int t_prime, Rng& rng,
                                     InvocationCounter* counter = nullptr) {
  Tape t;
  Binding bind(t, params);
  Var d = truncated_denoise_tape(t, bind, spec, t.constant(plan), t.constant(g),
                                 sch, t_prime, rng, counter);
  return from_unconstrained(d.value());
}

// Denoising loss for one clean state: pick a level uniformly, noise the
// state with the closed form, and score the noise prediction. The functor
// seam lets tests plant an oracle predictor.
using NoisePredictor = std::function<Var(Tape&, Var /*d_t*/, int /*level*/)>;

inline Var pd_loss_with(Tape& t, const Tensor& d0, const DiffusionSchedule& sch,
                        Rng& rng, const NoisePredictor& predictor) {
  const int level = 1 + static_cast<int>(rng.uniform_int(sch.t_count()));
  Tensor eps = rng.normal_tensor(d0.rows(), d0.cols());
  Tensor dt = forward_sample(d0, level, eps, sch);
  Var eps_hat = predictor(t, t.constant(dt), level);
  return mse(eps_hat, t.constant(eps));
}

inline Var pd_loss_tape(Tape& t, const Binding& bind, const DenoiserSpec& spec,
                        const Tensor& d0, Var g, const DiffusionSchedule& sch,
                        Rng& rng) {
  return pd_loss_with(t, d0, sch, rng, [&bind, &spec, g](Tape& tp, Var dt, int lv) {
    return pd_predict_noise(tp, bind, spec, dt, lv, g);
  });
}

inline double pd_loss(const ParamStore& params, const DenoiserSpec& spec,
                      const Tensor& d0, const Tensor& g,
                      const DiffusionSchedule& sch, Rng& rng) {
  Tape t;
  Binding bind(t, params);
  return pd_loss_tape(t, bind, spec, d0, t.constant(g), sch, rng).value().item();
}

}  // namespace epd
