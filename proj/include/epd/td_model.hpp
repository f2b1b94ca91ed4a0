#pragma once

#include <string>
#include <vector>

#include "epd/autodiff.hpp"
#include "epd/data.hpp"
#include "epd/gaussian.hpp"
#include "epd/params.hpp"
#include "epd/recurrent.hpp"

namespace epd {

// Future-trajectory distribution encoder. Maps a future (with optional
// neighbor futures) to per-step bivariate Gaussian parameters; trained by
// NLL of the ground truth under its own output. Training-time only: the
// inference path never evaluates it.
struct TDSpec {
  int hidden = 128;
  int t_future = 12;
  bool use_neighbors = true;
};

inline void add_td_params(ParamStore& ps, const TDSpec& spec, Rng& rng) {
  add_lstm_params(ps, "td.lstm", {2, spec.hidden}, rng);
  ps.add("td.fuse.w", glorot_init(2 * spec.hidden, spec.hidden, rng));
  ps.add("td.fuse.b", Tensor::zeros(1, spec.hidden));
  ps.add("td.head.w", glorot_init(spec.hidden, kGaussParamsPerStep * spec.t_future, rng));
  ps.add("td.head.b", Tensor::zeros(1, kGaussParamsPerStep * spec.t_future));
}

// Unconstrained parameter head [1, 5*t_future] on the tape. Neighbor
// aggregation is the mask-weighted mean of shared-cell encodings taken in
// canonical order, so permuting the neighbor list cannot change the output.
inline Var td_unconstrained(Tape& t, const Binding& bind, const TDSpec& spec,
                            const Tensor& ego_future,
                            const std::vector<Tensor>& neighbor_futures,
                            const std::vector<unsigned char>& mask) {
  if (static_cast<int>(ego_future.rows()) != spec.t_future || ego_future.cols() != 2)
    throw ShapeError("td: ego future must be [" + std::to_string(spec.t_future) +
                     "x2], got " + ego_future.shape_str());
  LstmVars cell = bind_lstm(bind, "td.lstm", spec.hidden);
  Var ego_h = lstm_last_hidden(t, cell, t.constant(ego_future));

  Var nbr = t.constant(Tensor::zeros(1, spec.hidden));
  if (spec.use_neighbors && !neighbor_futures.empty()) {
    int used = 0;
    for (std::size_t j : canonical_neighbor_order(neighbor_futures)) {
      if (!mask[j]) continue;
      Var h = lstm_last_hidden(t, cell, t.constant(neighbor_futures[j]));
      nbr = used == 0 ? h : add(nbr, h);
      ++used;
    }
    if (used > 1) nbr = smul(nbr, 1.0 / used);
  }
  Var fused = tanh(add_rowvec(matmul(concat_cols(ego_h, nbr), bind["td.fuse.w"]),
                              bind["td.fuse.b"]));
  return add_rowvec(matmul(fused, bind["td.head.w"]), bind["td.head.b"]);
}

// Value-only wrapper used where no gradient is needed.
inline GaussianSeq encode_future(const ParamStore& params, const TDSpec& spec,
                                 const Tensor& ego_future,
                                 const std::vector<Tensor>& neighbor_futures,
                                 const std::vector<unsigned char>& mask) {
  Tape t;
  Binding bind(t, params);
  return from_unconstrained(
      td_unconstrained(t, bind, spec, ego_future, neighbor_futures, mask).value());
}

inline GaussianSeq encode_future(const ParamStore& params, const TDSpec& spec,
                                 const SceneWindow& w) {
  return encode_future(params, spec, w.ego_future, w.neighbor_futures, w.social_mask);
}

}  // namespace epd
