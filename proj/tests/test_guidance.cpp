#include <algorithm>
#include <cmath>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "epd/grad_check.hpp"
#include "epd/guidance.hpp"

using namespace epd;
using Catch::Matchers::ContainsSubstring;

namespace {

SceneWindow make_window(Rng& rng, int n_neighbors, int t_past = 8,
                        int t_future = 12) {
  SceneWindow w;
  w.t_past = t_past;
  w.t_future = t_future;
  w.ego_past = rng.normal_tensor(t_past, 2);
  w.ego_future = rng.normal_tensor(t_future, 2);
  for (int j = 0; j < n_neighbors; ++j) {
    w.neighbor_pasts.push_back(rng.normal_tensor(t_past, 2));
    w.neighbor_futures.push_back(rng.normal_tensor(t_future, 2));
    w.neighbor_ids.push_back(j + 2);
    w.social_mask.push_back(1);
    w.neighbor_padded.push_back(0);
  }
  return w;
}

ParamStore make_params(const GGSpec& spec, std::uint64_t seed) {
  Rng rng(seed, 0);
  ParamStore ps;
  add_gg_params(ps, spec, rng);
  return ps;
}

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::equal(a.data.begin(), a.data.end(), b.data.begin());
}

}  // namespace

TEST_CASE("zero input with zero weights gives a zero temporal feature") {
  GGSpec spec;
  ParamStore ps = make_params(spec, 1);
  for (std::size_t i = 0; i < ps.size(); ++i)
    for (double& v : ps.item(i).second.data) v = 0.0;

  Tensor f = encode_temporal(ps, spec, Tensor::zeros(8, 2));
  REQUIRE(f.rows() == 1);
  REQUIRE(f.cols() == 128);
  for (double v : f.data) CHECK(v == 0.0);
}

TEST_CASE("feature halves are 128-wide and guidance is their exact concatenation") {
  GGSpec spec;
  ParamStore ps = make_params(spec, 2);
  Rng wrng(3, 0);
  SceneWindow w = make_window(wrng, 3);

  GuidanceFeature out = guidance(ps, spec, w);
  REQUIRE(out.f_temp.cols() == 128);
  REQUIRE(out.f_spat.cols() == 128);
  REQUIRE(out.g.rows() == 1);
  REQUIRE(out.g.cols() == 256);
  for (int j = 0; j < 128; ++j) {
    CHECK(out.g.at(0, j) == out.f_temp.at(0, j));
    CHECK(out.g.at(0, 128 + j) == out.f_spat.at(0, j));
  }
  for (double v : out.g.data) CHECK(std::isfinite(v));

  // Determinism: the same window must reproduce the same vector bitwise.
  GuidanceFeature again = guidance(ps, spec, w);
  CHECK(same_bits(out.g, again.g));
}

TEST_CASE("empty or fully masked neighbor sets return the learned null feature") {
  GGSpec spec;
  ParamStore ps = make_params(spec, 4);
  Rng nrng(5, 0);
  ps.at("gg.null") = nrng.normal_tensor(1, 128);
  const Tensor& null_vec = ps.at("gg.null");

  Rng wrng(6, 0);
  SceneWindow none = make_window(wrng, 0);
  CHECK(same_bits(encode_social(ps, spec, none.ego_past, none.neighbor_pasts,
                                none.social_mask),
                  null_vec));

  SceneWindow masked = make_window(wrng, 3);
  std::fill(masked.social_mask.begin(), masked.social_mask.end(), 0);
  CHECK(same_bits(encode_social(ps, spec, masked.ego_past, masked.neighbor_pasts,
                                masked.social_mask),
                  null_vec));
  CHECK(same_bits(guidance(ps, spec, masked).f_spat, null_vec));
}

TEST_CASE("a single neighbor receives attention weight one") {
  // The softmax of a one-logit row is exactly 1, so the context must equal
  // that neighbor's value projection bitwise. Holds per head as well.
  for (int heads : {1, 4}) {
    GGSpec spec;
    spec.heads = heads;
    ParamStore ps = make_params(spec, 7);
    Rng wrng(8, 0);
    SceneWindow w = make_window(wrng, 1);

    Tensor got = encode_social(ps, spec, w.ego_past, w.neighbor_pasts, w.social_mask);

    Tape t;
    Binding bind(t, ps);
    LstmVars cell = bind_lstm(bind, "gg.lstm", spec.hidden);
    Var h = lstm_last_hidden(t, cell, t.constant(w.neighbor_pasts[0]));
    Var v = matmul(h, bind["gg.attn.wv"]);
    Tensor expected =
        tanh(add_rowvec(matmul(v, bind["gg.spat.w"]), bind["gg.spat.b"])).value();

    INFO("heads=" << heads);
    CHECK(same_bits(got, expected));
  }
}

TEST_CASE("neighbor permutation leaves features identical") {
  std::vector<GGSpec> specs(3);
  specs[1].heads = 2;
  specs[2].share_cell = false;
  for (std::size_t si = 0; si < specs.size(); ++si) {
    const GGSpec& spec = specs[si];
    ParamStore ps = make_params(spec, 10 + si);
    Rng wrng(20 + si, 0);
    SceneWindow w = make_window(wrng, 5);
    w.social_mask = {1, 0, 1, 1, 1};

    Tensor base_spat = encode_social(ps, spec, w.ego_past, w.neighbor_pasts,
                                     w.social_mask);
    Tensor base_g = guidance(ps, spec, w).g;
    for (int r = 1; r < 5; ++r) {
      SceneWindow p = w;
      std::rotate(p.neighbor_pasts.begin(), p.neighbor_pasts.begin() + r,
                  p.neighbor_pasts.end());
      std::rotate(p.neighbor_futures.begin(), p.neighbor_futures.begin() + r,
                  p.neighbor_futures.end());
      std::rotate(p.social_mask.begin(), p.social_mask.begin() + r,
                  p.social_mask.end());
      std::rotate(p.neighbor_ids.begin(), p.neighbor_ids.begin() + r,
                  p.neighbor_ids.end());
      INFO("spec " << si << " rotation " << r);
      CHECK(same_bits(encode_social(ps, spec, p.ego_past, p.neighbor_pasts,
                                    p.social_mask),
                      base_spat));
      CHECK(same_bits(guidance(ps, spec, p).g, base_g));
    }
  }
}

TEST_CASE("translating raw coordinates is cancelled by normalization") {
  // Coordinates on a 1/1024 grid and a power-of-two shift keep every add and
  // subtract exact, so the invariance must hold bitwise, not approximately.
  GGSpec spec;
  ParamStore ps = make_params(spec, 30);
  Rng grng(31, 0);
  auto grid = [&]() {
    return (static_cast<double>(grng.uniform_int(32768)) - 16384.0) / 1024.0;
  };
  auto grid_tensor = [&](int r) {
    Tensor x = Tensor::zeros(r, 2);
    for (double& v : x.data) v = grid();
    return x;
  };

  SceneWindow w;
  w.ego_past = grid_tensor(8);
  w.ego_future = grid_tensor(12);
  for (int j = 0; j < 2; ++j) {
    w.neighbor_pasts.push_back(grid_tensor(8));
    w.neighbor_futures.push_back(grid_tensor(12));
    w.neighbor_ids.push_back(j + 2);
    w.social_mask.push_back(1);
    w.neighbor_padded.push_back(0);
  }

  SceneWindow shifted = w;
  const double tx = 512.0, ty = -768.0;
  auto shift = [&](Tensor& x) {
    for (std::size_t i = 0; i < x.rows(); ++i) {
      x.at(i, 0) += tx;
      x.at(i, 1) += ty;
    }
  };
  shift(shifted.ego_past);
  shift(shifted.ego_future);
  for (Tensor& np : shifted.neighbor_pasts) shift(np);
  for (Tensor& nf : shifted.neighbor_futures) shift(nf);

  normalize(w);
  normalize(shifted);
  CHECK(same_bits(w.ego_past, shifted.ego_past));
  CHECK(same_bits(guidance(ps, spec, w).g, guidance(ps, spec, shifted).g));
}

TEST_CASE("shape and mask mismatches are rejected") {
  GGSpec spec;
  ParamStore ps = make_params(spec, 40);
  Rng wrng(41, 0);
  SceneWindow w = make_window(wrng, 2);

  CHECK_THROWS_AS(encode_temporal(ps, spec, Tensor::zeros(7, 2)), ShapeError);
  CHECK_THROWS_WITH(encode_temporal(ps, spec, Tensor::zeros(7, 2)),
                    ContainsSubstring("ego past"));
  SceneWindow bad = w;
  bad.neighbor_pasts[1] = Tensor::zeros(8, 3);
  CHECK_THROWS_WITH(
      encode_social(ps, spec, bad.ego_past, bad.neighbor_pasts, bad.social_mask),
      ContainsSubstring("neighbor past"));
  std::vector<unsigned char> short_mask = {1};
  CHECK_THROWS_WITH(encode_social(ps, spec, w.ego_past, w.neighbor_pasts, short_mask),
                    ContainsSubstring("mask"));

  GGSpec bad_heads;
  bad_heads.feature = 6;
  bad_heads.heads = 4;
  Rng prng(42, 0);
  ParamStore tmp;
  CHECK_THROWS_AS(add_gg_params(tmp, bad_heads, prng), ShapeError);
}

TEST_CASE("the neighbor cell is separate only when sharing is off") {
  GGSpec shared;
  ParamStore ps_shared = make_params(shared, 50);
  CHECK_FALSE(ps_shared.has("gg.nbr_lstm.wx"));

  GGSpec split;
  split.share_cell = false;
  ParamStore ps = make_params(split, 50);
  REQUIRE(ps.has("gg.nbr_lstm.wx"));

  Rng wrng(51, 0);
  SceneWindow w = make_window(wrng, 2);
  Tensor temp0 = encode_temporal(ps, split, w.ego_past);
  Tensor spat0 = encode_social(ps, split, w.ego_past, w.neighbor_pasts, w.social_mask);
  for (double& v : ps.at("gg.nbr_lstm.wx").data) v += 0.5;
  CHECK(same_bits(encode_temporal(ps, split, w.ego_past), temp0));
  CHECK_FALSE(same_bits(
      encode_social(ps, split, w.ego_past, w.neighbor_pasts, w.social_mask), spat0));
}

TEST_CASE("gradients match finite differences for every parameter") {
  GGSpec spec;
  spec.hidden = 6;
  spec.feature = 8;
  spec.heads = 2;
  spec.share_cell = false;
  ParamStore ps = make_params(spec, 60);
  Rng wrng(61, 0);
  Rng prng(62, 0);
  Tensor proj = prng.normal_tensor(1, spec.guidance_dim());

  // With neighbors the attention path is live; without them the null vector
  // is. Together the two windows exercise every parameter.
  for (int n_neighbors : {3, 0}) {
    SceneWindow w = make_window(wrng, n_neighbors);
    if (n_neighbors > 0) w.social_mask[1] = 0;

    auto loss = [&]() {
      Tape t;
      Binding bind(t, ps);
      Var g = gg_guidance(t, bind, spec, w);
      return sum(mul(g, t.constant(proj))).value().item();
    };

    Tape t;
    Binding bind(t, ps);
    Var g = gg_guidance(t, bind, spec, w);
    Var out = sum(mul(g, t.constant(proj)));
    t.backward(out);
    ParamStore grads = bind.grads(t);

    FiniteDiffReport rep = finite_diff_check(ps, loss, grads, 1e-5, 1e-4);
    INFO("neighbors " << n_neighbors << " worst " << rep.worst_param << "["
                      << rep.worst_index << "] rel " << rep.max_rel_error);
    CHECK(rep.pass);
  }
}
