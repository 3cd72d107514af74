#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>

#include "cpdet/boxes.hpp"
#include "cpdet/checkpoint.hpp"
#include "cpdet/grad_check.hpp"
#include "cpdet/nn.hpp"
#include "test_util.hpp"

using namespace cpdet;
using namespace cpdet_test;

TEST_CASE("giou hand-checked values") {
  BoxXyxy unit{0, 0, 1, 1};
  CHECK(giou_xyxy(unit, unit) == Catch::Approx(1.0));

  BoxXyxy far{2, 2, 3, 3};
  CHECK(giou_xyxy(unit, far) == Catch::Approx(-7.0 / 9.0).epsilon(1e-12));

  BoxXyxy outer{0, 0, 2, 2};
  BoxXyxy inner{0, 0, 1, 1};
  CHECK(giou_xyxy(outer, inner) == Catch::Approx(0.25).epsilon(1e-12));

  SECTION("symmetry and iou bound") {
    Rng rng(31);
    for (int t = 0; t < 50; ++t) {
      BoxCxcywh a{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.3)};
      BoxCxcywh b{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.3)};
      double gab = giou_xyxy(a.to_xyxy(), b.to_xyxy());
      double gba = giou_xyxy(b.to_xyxy(), a.to_xyxy());
      CHECK(gab == Catch::Approx(gba).margin(1e-12));
      CHECK(gab <= iou_xyxy(a.to_xyxy(), b.to_xyxy()) + 1e-12);
      CHECK(gab > -1.0);
      CHECK(gab <= 1.0);
    }
  }
  SECTION("degenerate boxes are rejected") {
    CHECK_THROWS_AS(giou_xyxy({0, 0, 0, 1}, unit), InputError);
    auto a = TensorD::from_vector({1, 4}, {0.5, 0.5, 0.0, 0.2});
    auto b = TensorD::from_vector({1, 4}, {0.5, 0.5, 0.1, 0.2});
    CHECK_THROWS_AS(giou_pairwise(a, b), InputError);
  }
}

TEST_CASE("tensor giou agrees with the scalar version and is differentiable") {
  Rng rng(32);
  size_t n = 6;
  std::vector<double> av(n * 4), bv(n * 4);
  for (size_t i = 0; i < n; ++i) {
    av[i * 4] = rng.uniform(0.25, 0.75);
    av[i * 4 + 1] = rng.uniform(0.25, 0.75);
    av[i * 4 + 2] = rng.uniform(0.08, 0.3);
    av[i * 4 + 3] = rng.uniform(0.08, 0.3);
    bv[i * 4] = rng.uniform(0.25, 0.75);
    bv[i * 4 + 1] = rng.uniform(0.25, 0.75);
    bv[i * 4 + 2] = rng.uniform(0.08, 0.3);
    bv[i * 4 + 3] = rng.uniform(0.08, 0.3);
  }
  auto a = TensorD::from_vector({n, 4}, av);
  auto b = TensorD::from_vector({n, 4}, bv);
  auto g = giou_pairwise(a, b);
  REQUIRE(g.shape() == Shape{n, 1});
  for (size_t i = 0; i < n; ++i) {
    BoxCxcywh pa{av[i * 4], av[i * 4 + 1], av[i * 4 + 2], av[i * 4 + 3]};
    BoxCxcywh pb{bv[i * 4], bv[i * 4 + 1], bv[i * 4 + 2], bv[i * 4 + 3]};
    CHECK(g.data()[i] == Catch::Approx(giou_xyxy(pa.to_xyxy(), pb.to_xyxy())).margin(1e-12));
  }

  std::vector<TensorD> leaves = {a, b};
  double err = grad_check(
      [&](const std::vector<TensorD>& ls) { return mean_all(giou_pairwise(ls[0], ls[1])); }, leaves);
  CHECK(err <= 1e-5);
}

TEST_CASE("linear layer forward and gradients") {
  Rng rng(33);
  Linear<double> lin(4, 3, rng);
  auto x = random_tensor(rng, {2, 4});
  auto y = lin.forward(x);
  REQUIRE(y.shape() == Shape{2, 3});
  for (size_t i = 0; i < 2; ++i)
    for (size_t j = 0; j < 3; ++j) {
      double acc = lin.b.data()[j];
      for (size_t p = 0; p < 4; ++p) acc += x.data()[i * 4 + p] * lin.w.data()[p * 3 + j];
      CHECK(y.data()[i * 3 + j] == Catch::Approx(acc).margin(1e-12));
    }
  CHECK_THROWS_AS(lin.forward(TensorD::zeros({2, 5})), ShapeError);

  std::vector<TensorD> leaves = {lin.w, lin.b};
  double err = grad_check(
      [&](const std::vector<TensorD>&) { return mean_all(lin.forward(x)); }, leaves);
  CHECK(err <= 1e-5);
}

TEST_CASE("layer norm, embedding, mlp, attention blocks") {
  Rng rng(34);
  SECTION("layer norm affine") {
    LayerNorm<double> ln(6);
    ln.gamma = random_tensor(rng, {6}).set_requires_grad();
    ln.beta = random_tensor(rng, {6}).set_requires_grad();
    auto x = random_tensor(rng, {3, 6});
    std::vector<TensorD> leaves = {ln.gamma, ln.beta, x};
    double err = grad_check(
        [&](const std::vector<TensorD>& ls) { return mean_all(mul(ln.forward(ls[2]), ls[2])); },
        leaves);
    CHECK(err <= 1e-5);
  }
  SECTION("embedding lookup") {
    Embedding<double> emb(5, 4, rng);
    auto v = emb.lookup({3, 0, 3});
    REQUIRE(v.shape() == Shape{3, 4});
    for (size_t j = 0; j < 4; ++j) {
      CHECK(v.data()[j] == emb.table.data()[3 * 4 + j]);
      CHECK(v.data()[2 * 4 + j] == emb.table.data()[3 * 4 + j]);
    }
  }
  SECTION("mlp gradient") {
    Mlp<double> mlp({4, 8, 2}, rng);
    auto x = random_tensor(rng, {3, 4});
    std::vector<TensorD> leaves;
    ParamVisitor<double> pv{[&](const std::string&, Tensor<double>& t) { leaves.push_back(t); }, ""};
    mlp.params(pv);
    double err = grad_check(
        [&](const std::vector<TensorD>&) { return mean_all(mlp.forward(x)); }, leaves);
    CHECK(err <= 1e-4);
  }
  SECTION("multi-head attention shapes and gradient") {
    MultiHeadAttention<double> mha(8, 2, rng);
    auto q = random_tensor(rng, {5, 8});
    auto kv = random_tensor(rng, {7, 8});
    auto y = mha.forward(q, kv, kv);
    REQUIRE(y.shape() == Shape{5, 8});

    std::vector<TensorD> leaves = {q, kv};
    double err = grad_check(
        [&](const std::vector<TensorD>& ls) {
          return mean_all(mha.forward(ls[0], ls[1], ls[1]));
        },
        leaves);
    CHECK(err <= 1e-5);
  }
  SECTION("zero-initialized output projection returns zeros") {
    MultiHeadAttention<double> mha(8, 2, rng, true);
    auto q = random_tensor(rng, {4, 8});
    auto y = mha.forward(q, q, q);
    for (double v : y.data()) CHECK(v == 0.0);
  }
}

TEST_CASE("checkpoint round-trip is byte-identical") {
  Rng rng(35);
  Checkpoint ck;
  auto a = TensorF::randn({3, 4}, rng);
  auto b = TensorF::randn({7}, rng);
  ck.add("alpha.w", a);
  ck.add("beta.b", b);
  ck.meta["step"] = 17;
  ck.meta["frozen"] = ordered_json::array({"beta.b"});

  std::string p1 = "ckpt_roundtrip_a.bin", p2 = "ckpt_roundtrip_b.bin";
  save_checkpoint(p1, ck);
  Checkpoint loaded = load_checkpoint(p1);
  save_checkpoint(p2, loaded);

  auto slurp = [](const std::string& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
  };
  std::string f1 = slurp(p1), f2 = slurp(p2);
  REQUIRE(!f1.empty());
  CHECK(f1 == f2);

  CHECK(loaded.meta.at("step").get<int>() == 17);
  auto a2 = TensorF::zeros({3, 4});
  loaded.copy_into("alpha.w", a2);
  for (size_t i = 0; i < a.numel(); ++i) CHECK(a2.data()[i] == a.data()[i]);

  SECTION("missing and mismatched tensors are errors") {
    auto wrong = TensorF::zeros({4, 3});
    CHECK_THROWS_AS(loaded.copy_into("alpha.w", wrong), ShapeError);
    auto any = TensorF::zeros({1});
    CHECK_THROWS_AS(loaded.copy_into("nope", any), StateError);
    auto dbl = TensorD::zeros({3, 4});
    CHECK_THROWS_AS(loaded.copy_into("alpha.w", dbl), StateError);
  }
  SECTION("non-container file is rejected") {
    std::ofstream bad("ckpt_bad.bin", std::ios::binary);
    bad << "definitely not a tensor container";
    bad.close();
    CHECK_THROWS_AS(load_checkpoint("ckpt_bad.bin"), InputError);
    std::remove("ckpt_bad.bin");
  }
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}
