#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "epd/autodiff.hpp"
#include "epd/data.hpp"
#include "epd/params.hpp"
#include "epd/recurrent.hpp"

namespace epd {

// Guidance encoder. Temporal features come from a recurrent pass over the
// ego past; social features from scaled dot-product attention over neighbor
// encodings with the temporal feature as query. The concatenation g of the
// two conditions every downstream model.
struct GGSpec {
  int in_dim = 2;
  int hidden = 128;
  int feature = 128;
  int heads = 1;
  int t_past = 8;
  bool share_cell = true;

  int guidance_dim() const { return 2 * feature; }
};

struct GuidanceFeature {
  Tensor f_temp;  // [1, feature]
  Tensor f_spat;  // [1, feature]
  Tensor g;       // [1, 2*feature], exactly concat(f_temp, f_spat)
};

inline void add_gg_params(ParamStore& ps, const GGSpec& spec, Rng& rng) {
  if (spec.heads < 1 || spec.feature % spec.heads != 0)
    throw ShapeError("gg: feature " + std::to_string(spec.feature) +
                     " not divisible by heads " + std::to_string(spec.heads));
  add_lstm_params(ps, "gg.lstm", {spec.in_dim, spec.hidden}, rng);
  if (!spec.share_cell)
    add_lstm_params(ps, "gg.nbr_lstm", {spec.in_dim, spec.hidden}, rng);
  ps.add("gg.temp.w", glorot_init(spec.hidden, spec.feature, rng));
  ps.add("gg.temp.b", Tensor::zeros(1, spec.feature));
  ps.add("gg.attn.wq", glorot_init(spec.feature, spec.feature, rng));
  ps.add("gg.attn.wk", glorot_init(spec.hidden, spec.feature, rng));
  ps.add("gg.attn.wv", glorot_init(spec.hidden, spec.feature, rng));
  ps.add("gg.spat.w", glorot_init(spec.feature, spec.feature, rng));
  ps.add("gg.spat.b", Tensor::zeros(1, spec.feature));
  // Learned stand-in for the social feature when no neighbor is visible.
  ps.add("gg.null", Tensor::zeros(1, spec.feature));
}

namespace detail {

inline void require_past_shape(const Tensor& past, const GGSpec& spec,
                               const char* who) {
  if (static_cast<int>(past.rows()) != spec.t_past ||
      static_cast<int>(past.cols()) != spec.in_dim)
    throw ShapeError(std::string("gg: ") + who + " must be [" +
                     std::to_string(spec.t_past) + "x" +
                     std::to_string(spec.in_dim) + "], got " + past.shape_str());
}

}  // namespace detail

// Both feature halves in one pass so the ego encoding is computed once.
// Neighbors are encoded in canonical order; attention weights are a
// row-softmax, so permuting the neighbor list cannot change the output.
inline std::pair<Var, Var> gg_features(Tape& t, const Binding& bind,
                                       const GGSpec& spec, const Tensor& ego_past,
                                       const std::vector<Tensor>& neighbor_pasts,
                                       const std::vector<unsigned char>& mask) {
  detail::require_past_shape(ego_past, spec, "ego past");
  if (mask.size() != neighbor_pasts.size())
    throw ShapeError("gg: mask size " + std::to_string(mask.size()) +
                     " vs " + std::to_string(neighbor_pasts.size()) + " neighbors");
  for (const Tensor& np : neighbor_pasts)
    detail::require_past_shape(np, spec, "neighbor past");

  LstmVars cell = bind_lstm(bind, "gg.lstm", spec.hidden);
  Var ego_h = lstm_last_hidden(t, cell, t.constant(ego_past));
  Var f_temp = tanh(add_rowvec(matmul(ego_h, bind["gg.temp.w"]), bind["gg.temp.b"]));

  std::vector<Tensor> present;
  for (std::size_t j = 0; j < neighbor_pasts.size(); ++j)
    if (mask[j]) present.push_back(neighbor_pasts[j]);
  if (present.empty()) return {f_temp, bind["gg.null"]};

  LstmVars nbr_cell = spec.share_cell ? cell : bind_lstm(bind, "gg.nbr_lstm", spec.hidden);
  std::vector<Var> encodings;
  for (std::size_t j : canonical_neighbor_order(present))
    encodings.push_back(lstm_last_hidden(t, nbr_cell, t.constant(present[j])));
  Var enc = concat_rows(encodings);               // [n, hidden]
  Var keys = matmul(enc, bind["gg.attn.wk"]);     // [n, feature]
  Var vals = matmul(enc, bind["gg.attn.wv"]);
  Var query = matmul(f_temp, bind["gg.attn.wq"]); // [1, feature]

  const int dh = spec.feature / spec.heads;
  auto attend = [&](int h) {
    const std::size_t c0 = static_cast<std::size_t>(h) * dh, c1 = c0 + dh;
    Var logits = smul(matmul(slice_cols(query, c0, c1),
                             transpose(slice_cols(keys, c0, c1))),
                      1.0 / std::sqrt(static_cast<double>(dh)));
    return matmul(softmax(logits, 1), slice_cols(vals, c0, c1));
  };
  Var ctx = attend(0);
  for (int h = 1; h < spec.heads; ++h) ctx = concat_cols(ctx, attend(h));
  Var f_spat = tanh(add_rowvec(matmul(ctx, bind["gg.spat.w"]), bind["gg.spat.b"]));
  return {f_temp, f_spat};
}

inline Var gg_temporal(Tape& t, const Binding& bind, const GGSpec& spec,
                       const Tensor& ego_past) {
  detail::require_past_shape(ego_past, spec, "ego past");
  LstmVars cell = bind_lstm(bind, "gg.lstm", spec.hidden);
  Var ego_h = lstm_last_hidden(t, cell, t.constant(ego_past));
  return tanh(add_rowvec(matmul(ego_h, bind["gg.temp.w"]), bind["gg.temp.b"]));
}

inline Var gg_social(Tape& t, const Binding& bind, const GGSpec& spec,
                     const Tensor& ego_past,
                     const std::vector<Tensor>& neighbor_pasts,
                     const std::vector<unsigned char>& mask) {
  return gg_features(t, bind, spec, ego_past, neighbor_pasts, mask).second;
}

// Full guidance vector [1, 2*feature] on the tape.
inline Var gg_guidance(Tape& t, const Binding& bind, const GGSpec& spec,
                       const Tensor& ego_past,
                       const std::vector<Tensor>& neighbor_pasts,
                       const std::vector<unsigned char>& mask) {
  auto [f_temp, f_spat] = gg_features(t, bind, spec, ego_past, neighbor_pasts, mask);
  return concat_cols(f_temp, f_spat);
}

inline Var gg_guidance(Tape& t, const Binding& bind, const GGSpec& spec,
                       const SceneWindow& w) {
  return gg_guidance(t, bind, spec, w.ego_past, w.neighbor_pasts, w.social_mask);
}

// Value-only wrappers used where no gradient is needed.
inline Tensor encode_temporal(const ParamStore& params, const GGSpec& spec,
                              const Tensor& ego_past) {
  Tape t;
  Binding bind(t, params);
  return gg_temporal(t, bind, spec, ego_past).value();
}

inline Tensor encode_social(const ParamStore& params, const GGSpec& spec,
                            const Tensor& ego_past,
                            const std::vector<Tensor>& neighbor_pasts,
                            const std::vector<unsigned char>& mask) {
  Tape t;
  Binding bind(t, params);
  return gg_social(t, bind, spec, ego_past, neighbor_pasts, mask).value();
}

inline GuidanceFeature guidance(const ParamStore& params, const GGSpec& spec,
                                const Tensor& ego_past,
                                const std::vector<Tensor>& neighbor_pasts,
                                const std::vector<unsigned char>& mask) {
  Tape t;
  Binding bind(t, params);
  auto [f_temp, f_spat] = gg_features(t, bind, spec, ego_past, neighbor_pasts, mask);
  GuidanceFeature out;
  out.f_temp = f_temp.value();
  out.f_spat = f_spat.value();
  out.g = concat_cols(f_temp, f_spat).value();
  return out;
}

inline GuidanceFeature guidance(const ParamStore& params, const GGSpec& spec,
                                const SceneWindow& w) {
  return guidance(params, spec, w.ego_past, w.neighbor_pasts, w.social_mask);
}

}  // namespace epd
