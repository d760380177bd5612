#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "rfl/checkpoint.hpp"
#include "rfl/gradcheck.hpp"
#include "rfl/layers.hpp"

using namespace rfl;

namespace {

// Weighted sum of a tensor with a fixed random sheet; keeps every coordinate
// of the probed function non-degenerate during gradient checks.
Tensor weigh(const Tensor& t, uint64_t seed) {
  Rng rng(seed);
  Tensor r = Tensor::uniform(t.shape(), -1.0, 1.0, rng);
  return sum_all(mul(t, r));
}

}  // namespace

TEST_CASE("conv2d: 1x1 identity kernel leaves input unchanged") {
  Rng rng(1);
  Tensor x = Tensor::uniform({2, 1, 3, 4}, -1, 1, rng);
  Tensor w = Tensor::from_data({1, 1, 1, 1}, {1.0});
  Tensor b = Tensor::zeros({1});
  Tensor y = conv2d(x, w, b, 1, 1, 0, 0);
  CHECK(y.shape() == x.shape());
  CHECK(y.data() == x.data());
}

TEST_CASE("conv2d: 3x3 all-ones kernel on all-ones input sums to 9 plus bias") {
  Tensor x = Tensor::ones({1, 1, 3, 3});
  Tensor w = Tensor::ones({1, 1, 3, 3});
  Tensor b = Tensor::from_data({1}, {0.5});
  Tensor y = conv2d(x, w, b, 1, 1, 0, 0);
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.value() == doctest::Approx(9.5).epsilon(1e-15));
}

TEST_CASE("conv2d: errors") {
  Tensor x = Tensor::ones({1, 2, 3, 3});
  Tensor w = Tensor::ones({1, 1, 3, 3});
  CHECK_THROWS_AS(conv2d(x, w, Tensor::zeros({1}), 1, 1, 0, 0), ShapeError);
  Tensor w2 = Tensor::ones({1, 2, 5, 5});
  CHECK_THROWS_AS(conv2d(x, w2, Tensor::zeros({1}), 1, 1, 0, 0), ShapeError);
}

TEST_CASE("conv2d: gradient check below 1e-4") {
  Rng rng(2);
  Tensor x = Tensor::uniform({2, 2, 5, 6}, -1, 1, rng);
  Tensor w = Tensor::uniform({3, 2, 3, 3}, -0.5, 0.5, rng);
  Tensor b = Tensor::uniform({3}, -0.5, 0.5, rng);
  auto f = [](const std::vector<Tensor>& v) {
    return weigh(conv2d(v[0], v[1], v[2], 2, 1, 1, 1), 77);
  };
  CHECK(finite_diff_check(f, {x, w, b}) < 1e-4);
}

TEST_CASE("conv2d 1x1: no spatial mixing, single-pixel perturbation is local") {
  Rng rng(3);
  Tensor w = Tensor::uniform({4, 4, 1, 1}, -1, 1, rng);
  Tensor b = Tensor::uniform({4}, -1, 1, rng);
  Tensor x = Tensor::uniform({1, 4, 3, 5}, -1, 1, rng);
  Tensor y0 = conv2d(x, w, b, 1, 1, 0, 0);
  Tensor x2 = x.detach();
  const size_t py = 1, px = 2;  // perturb all channels of one pixel
  for (size_t c = 0; c < 4; ++c) x2.data()[(c * 3 + py) * 5 + px] += 0.25;
  Tensor y1 = conv2d(x2, w, b, 1, 1, 0, 0);
  for (size_t c = 0; c < 4; ++c)
    for (size_t iy = 0; iy < 3; ++iy)
      for (size_t ix = 0; ix < 5; ++ix) {
        const double d =
            std::abs(y1.at({0, c, iy, ix}) - y0.at({0, c, iy, ix}));
        if (iy == py && ix == px)
          CHECK(d > 0.0);
        else
          CHECK(d == 0.0);
      }
}

TEST_CASE("maxpool2d: examples and gradient") {
  Tensor x = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor y = maxpool2d(x, 2, 2, 2, 2);
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.value() == 4.0);

  // width padding used by the backbone stride plan: 25 -> 26
  Rng rng(4);
  Tensor z = Tensor::uniform({1, 2, 8, 25}, -1, 1, rng);
  Tensor p = maxpool2d(z, 2, 2, 2, 1, 0, 1);
  CHECK(p.shape() == Shape{1, 2, 4, 26});

  auto f = [](const std::vector<Tensor>& v) {
    return weigh(maxpool2d(v[0], 2, 2, 2, 1, 0, 1), 78);
  };
  CHECK(finite_diff_check(f, {z}) < 1e-4);
}

TEST_CASE("linear: identity weights act as identity") {
  Tensor w = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor b = Tensor::zeros({2});
  Tensor x = Tensor::from_data({3, 2}, {1, 2, 3, 4, 5, 6});
  CHECK(linear_forward(w, b, x).data() == x.data());
}

TEST_CASE("norm: constant input collapses to the shift") {
  NormLayer bn(3, NormVariant::Batch);
  for (size_t c = 0; c < 3; ++c) bn.beta.data()[c] = 0.5 * double(c);
  Tensor x = Tensor::full({2, 3, 2, 2}, 7.0);
  Tensor y = bn.forward(x, true);
  for (size_t c = 0; c < 3; ++c)
    for (size_t i = 0; i < 2; ++i)
      for (size_t hw = 0; hw < 4; ++hw)
        CHECK(y.at({i, c, hw / 2, hw % 2}) ==
              doctest::Approx(0.5 * double(c)).epsilon(1e-12));
}

TEST_CASE("norm: standardizes mean 5 std 2 to mean 0 std 1") {
  NormLayer bn(1, NormVariant::Batch);
  Rng rng(5);
  Tensor x = Tensor::uniform({4, 1, 8, 8}, 5.0 - 2.0 * 1.7320508075688772,
                             5.0 + 2.0 * 1.7320508075688772, rng);
  Tensor y = bn.forward(x, true);
  double mean = 0;
  for (double v : y.data()) mean += v;
  mean /= double(y.numel());
  double var = 0;
  for (double v : y.data()) var += (v - mean) * (v - mean);
  var /= double(y.numel());
  CHECK(std::abs(mean) < 1e-6);
  CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-3);  // eps slightly deflates std
}

TEST_CASE("norm: gradient checks for both variants") {
  Rng rng(6);
  Tensor x = Tensor::uniform({2, 3, 2, 4}, -2, 2, rng);
  for (NormVariant variant : {NormVariant::Batch, NormVariant::Layer}) {
    auto f = [variant](const std::vector<Tensor>& v) {
      NormLayer n(3, variant);
      n.gamma = v[1];
      n.beta = v[2];
      return weigh(n.forward(v[0], true), 79);
    };
    Tensor gamma = Tensor::uniform({3}, 0.5, 1.5, rng);
    Tensor beta = Tensor::uniform({3}, -0.5, 0.5, rng);
    CHECK(finite_diff_check(f, {x, gamma, beta}) < 1e-4);
  }
}

TEST_CASE("norm: inference mode is a deterministic affine map") {
  NormLayer bn(2, NormVariant::Batch);
  Rng rng(7);
  for (int step = 0; step < 3; ++step)
    bn.forward(Tensor::uniform({4, 2, 3, 3}, -1, 1, rng), true);
  Tensor x = Tensor::uniform({2, 2, 3, 3}, -1, 1, rng);
  Tensor y1 = bn.forward(x, false);
  Tensor y2 = bn.forward(x, false);
  CHECK(y1.data() == y2.data());
  // affine: f(2x) - f(x) == f(x) - f(0) elementwise
  Tensor y0 = bn.forward(Tensor::zeros({2, 2, 3, 3}), false);
  Tensor y2x = bn.forward(add(x, x), false);
  for (size_t i = 0; i < x.numel(); ++i)
    CHECK(y2x.data()[i] - y1.data()[i] ==
          doctest::Approx(y1.data()[i] - y0.data()[i]).epsilon(1e-9));
}

TEST_CASE("bilstm: t=1 uses the same step for both halves") {
  BiLstm rnn(3, 2, 123);
  Rng rng(8);
  Tensor x = Tensor::uniform({2, 1, 3}, -1, 1, rng);
  Tensor y = rnn.forward(x);
  CHECK(y.shape() == Shape{2, 1, 4});
  Tensor x2 = reshape(x, {2, 3});
  auto [hf, cf] = rnn.fwd.forward(x2, Tensor::zeros({2, 2}), Tensor::zeros({2, 2}));
  auto [hb, cb] = rnn.bwd.forward(x2, Tensor::zeros({2, 2}), Tensor::zeros({2, 2}));
  for (size_t i = 0; i < 2; ++i) {
    CHECK(y.at({i, 0, 0}) == hf.at({i, 0}));
    CHECK(y.at({i, 0, 1}) == hf.at({i, 1}));
    CHECK(y.at({i, 0, 2}) == hb.at({i, 0}));
    CHECK(y.at({i, 0, 3}) == hb.at({i, 1}));
  }
}

TEST_CASE("bilstm: reversing the sequence swaps the directional halves") {
  BiLstm rnn(3, 2, 124);
  Rng rng(9);
  const size_t b = 2, t = 5, f = 3;
  Tensor x = Tensor::uniform({b, t, f}, -1, 1, rng);
  std::vector<Tensor> rev_rows(t);
  for (size_t s = 0; s < t; ++s) rev_rows[s] = slice(x, 1, t - 1 - s, 1);
  Tensor xr = concat(rev_rows, 1);
  Tensor y = rnn.forward(x);

  // same cells applied to the reversed sequence, with roles swapped by hand
  BiLstm swapped(3, 2, 0);
  swapped.fwd = rnn.bwd;
  swapped.bwd = rnn.fwd;
  Tensor yr = swapped.forward(xr);
  for (size_t i = 0; i < b; ++i)
    for (size_t s = 0; s < t; ++s)
      for (size_t u = 0; u < 2; ++u) {
        CHECK(y.at({i, s, u}) ==
              doctest::Approx(yr.at({i, t - 1 - s, 2 + u})).epsilon(1e-12));
        CHECK(y.at({i, s, 2 + u}) ==
              doctest::Approx(yr.at({i, t - 1 - s, u})).epsilon(1e-12));
      }
}

TEST_CASE("bilstm: gradient check on b=1,t=3,f=4,h=3") {
  Rng rng(10);
  Tensor x = Tensor::uniform({1, 3, 4}, -1, 1, rng);
  auto f = [](const std::vector<Tensor>& v) {
    BiLstm rnn(4, 3, 555);
    rnn.fwd.wx = v[1];
    return weigh(rnn.forward(v[0]), 80);
  };
  BiLstm proto(4, 3, 555);
  CHECK(finite_diff_check(f, {x, proto.fwd.wx}) < 1e-4);
}

TEST_CASE("lstm cell: gradient check") {
  Rng rng(11);
  Tensor x = Tensor::uniform({2, 3}, -1, 1, rng);
  Tensor h = Tensor::uniform({2, 4}, -1, 1, rng);
  Tensor c = Tensor::uniform({2, 4}, -1, 1, rng);
  auto f = [](const std::vector<Tensor>& v) {
    LstmCell cell(3, 4, 321);
    cell.wx = v[1];
    cell.wh = v[2];
    cell.bias = v[3];
    auto [hn, cn] = cell.forward(v[0], Tensor::zeros({2, 4}), Tensor::zeros({2, 4}));
    return add(weigh(hn, 81), weigh(cn, 82));
  };
  LstmCell proto(3, 4, 321);
  CHECK(finite_diff_check(f, {x, proto.wx, proto.wh, proto.bias}) < 1e-4);
  (void)h;
  (void)c;
}

TEST_CASE("attention step: singleton time axis gives weight 1") {
  AttnDecoderCell cell(4, 3, 5, 42);
  Rng rng(12);
  Tensor enc = Tensor::uniform({2, 1, 4}, -1, 1, rng);
  auto out = cell.step(enc, cell.initial_state(2), {0, 1});
  CHECK(out.attn.shape() == Shape{2, 1});
  CHECK(out.attn.at({0, 0}) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(out.attn.at({1, 0}) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(out.logits.shape() == Shape{2, 5});
}

TEST_CASE("attention step: identical encoder rows give uniform weights") {
  AttnDecoderCell cell(4, 3, 5, 43);
  Tensor row = Tensor::from_data({1, 1, 4}, {0.3, -0.2, 0.9, 0.1});
  Tensor enc = concat({row, row, row, row}, 1);  // [1,4,4]
  auto out = cell.step(enc, cell.initial_state(1), {2});
  for (size_t s = 0; s < 4; ++s)
    CHECK(out.attn.at({0, s}) == doctest::Approx(0.25).epsilon(1e-12));
  double total = 0;
  for (size_t s = 0; s < 4; ++s) total += out.attn.at({0, s});
  CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("attention step: invalid symbol index rejected") {
  AttnDecoderCell cell(4, 3, 5, 44);
  Tensor enc = Tensor::ones({1, 2, 4});
  CHECK_THROWS_AS(cell.step(enc, cell.initial_state(1), {5}), ValueError);
}

TEST_CASE("attention: gradient through two chained steps") {
  Rng rng(13);
  Tensor enc = Tensor::uniform({1, 3, 4}, -1, 1, rng);
  auto f = [](const std::vector<Tensor>& v) {
    AttnDecoderCell cell(4, 3, 5, 45);
    cell.w_e = v[1];
    cell.emb = v[2];
    auto s0 = cell.step(v[0], cell.initial_state(1), {4});
    auto s1 = cell.step(v[0], s0.state, {1});
    return add(weigh(s0.logits, 83), weigh(s1.logits, 84));
  };
  AttnDecoderCell proto(4, 3, 5, 45);
  CHECK(finite_diff_check(f, {enc, proto.w_e, proto.emb}) < 1e-4);
}

TEST_CASE("every layer passes gradient checks on 5 random instances") {
  Rng rng(14);
  for (int inst = 0; inst < 5; ++inst) {
    const uint64_t seed = 1000 + inst;
    Tensor x4 = Tensor::uniform({2, 2, 4, 5}, -1, 1, rng);
    auto conv_f = [seed](const std::vector<Tensor>& v) {
      Conv2dLayer layer(2, 3, 3, 3, 1, 1, 1, 1, seed);
      layer.weight = v[1];
      return weigh(layer.forward(v[0]), 85 + seed);
    };
    Conv2dLayer cproto(2, 3, 3, 3, 1, 1, 1, 1, seed);
    CHECK(finite_diff_check(conv_f, {x4, cproto.weight}) < 1e-4);

    Tensor x2 = Tensor::uniform({3, 4}, -1, 1, rng);
    auto lin_f = [seed](const std::vector<Tensor>& v) {
      Linear lin(4, 2, seed);
      lin.w = v[1];
      lin.b = v[2];
      return weigh(lin.forward(v[0]), 86 + seed);
    };
    Linear lproto(4, 2, seed);
    CHECK(finite_diff_check(lin_f, {x2, lproto.w, lproto.b}) < 1e-4);
  }
}

TEST_CASE("checkpoint: named tensor round trip") {
  Rng rng(15);
  std::vector<NamedTensor> entries;
  entries.push_back({"stem.conv.w", Tensor::uniform({3, 2, 3, 3}, -1, 1, rng)});
  entries.push_back({"head.b", Tensor::uniform({7}, -1, 1, rng)});
  entries.push_back({"bn.running_mean", Tensor::uniform({4}, -1, 1, rng)});
  const std::string path = "/tmp/rfl_test_checkpoint.bin";
  write_checkpoint(path, entries);
  auto back = read_checkpoint(path);
  REQUIRE(back.size() == entries.size());
  for (size_t i = 0; i < entries.size(); ++i) {
    CHECK(back[i].name == entries[i].name);
    CHECK(back[i].tensor.shape() == entries[i].tensor.shape());
    CHECK(back[i].tensor.data() == entries[i].tensor.data());
  }
  CHECK_THROWS_AS(read_checkpoint("/tmp/definitely_missing_ckpt.bin"), IoError);
  std::remove(path.c_str());
}
