#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "epd/autodiff.hpp"
#include "epd/params.hpp"

namespace epd {

// Gated recurrent cell over 2-D position sequences, shared by the future and
// past encoders. Gate order in the fused weight matrices: input, forget,
// cell, output.
struct LstmSpec {
  int in_dim = 2;
  int hidden = 128;
};

inline void add_lstm_params(ParamStore& ps, const std::string& prefix,
                            const LstmSpec& spec, Rng& rng) {
  ps.add(prefix + ".wx", glorot_init(spec.in_dim, 4 * spec.hidden, rng));
  ps.add(prefix + ".wh", glorot_init(spec.hidden, 4 * spec.hidden, rng));
  ps.add(prefix + ".b", Tensor::zeros(1, 4 * spec.hidden));
}

struct LstmVars {
  Var wx, wh, b;
  int hidden;
};

inline LstmVars bind_lstm(const Binding& bind, const std::string& prefix, int hidden) {
  return {bind[prefix + ".wx"], bind[prefix + ".wh"], bind[prefix + ".b"], hidden};
}

// Content-derived processing order for neighbor sets. Aggregations downstream
// sum floating-point terms, so a fixed order is what makes permuted inputs
// produce identical outputs.
inline std::vector<std::size_t> canonical_neighbor_order(const std::vector<Tensor>& nbrs) {
  std::vector<std::size_t> idx(nbrs.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    const Tensor& ta = nbrs[a];
    const Tensor& tb = nbrs[b];
    if (ta.numel() != tb.numel()) return ta.numel() < tb.numel();
    for (std::size_t i = 0; i < ta.numel(); ++i)
      if (ta.data[i] != tb.data[i]) return ta.data[i] < tb.data[i];
    return false;
  });
  return idx;
}

// Runs the cell over seq [T, in_dim] and returns the final hidden state
// [1, hidden]. State starts at zero.
inline Var lstm_last_hidden(Tape& t, const LstmVars& cell, Var seq) {
  const int H = cell.hidden;
  Var h = t.constant(Tensor::zeros(1, H));
  Var c = t.constant(Tensor::zeros(1, H));
  const std::size_t T = seq.value().rows();
  for (std::size_t k = 0; k < T; ++k) {
    Var x = slice_rows(seq, k, k + 1);
    Var z = add(add(matmul(x, cell.wx), matmul(h, cell.wh)), cell.b);
    Var i = sigmoid(slice_cols(z, 0, H));
    Var f = sigmoid(slice_cols(z, H, 2 * H));
    Var g = tanh(slice_cols(z, 2 * H, 3 * H));
    Var o = sigmoid(slice_cols(z, 3 * H, 4 * H));
    c = add(mul(f, c), mul(i, g));
    h = mul(o, tanh(c));
  }
  return h;
}

}  // namespace epd
