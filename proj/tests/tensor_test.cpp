#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <vector>

#include "albertlab/common.hpp"
#include "albertlab/tensor.hpp"
#include "support.hpp"

using namespace albert;
using testsupport::grad_check;
using testsupport::random_tensor;

namespace {

// Weighted-sum loss so every output element gets a distinct gradient.
Tensor weighted(const Tensor& out, const Tensor& weights) { return sum(mul(out, weights)); }

constexpr double kFdTol = 1e-6;

}  // namespace

TEST_CASE("construction and accessors") {
  Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.rank() == 2);
  CHECK(t.numel() == 6);
  CHECK(t.dim(0) == 2);
  CHECK(t.dim(-1) == 3);
  CHECK(t.data()[4] == 5.0);
  CHECK(shape_to_string(t.shape()) == "(2, 3)");
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1.0}), ShapeError);
  CHECK_THROWS_AS(Tensor::zeros({0, 3}), ShapeError);
  CHECK_THROWS_AS(t.item(), UsageError);
  CHECK(Tensor::scalar(3.5).item() == 3.5);

  Tensor shared = t;  // same storage
  shared.data()[0] = 42.0;
  CHECK(t.data()[0] == 42.0);
  Tensor deep = t.clone();
  deep.data()[0] = -1.0;
  CHECK(t.data()[0] == 42.0);

  CHECK_THROWS_AS(t.grad(), UsageError);
  t.set_requires_grad(true);
  CHECK(t.grad().size() == 6);
}

TEST_CASE("matmul forward matches hand product") {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
  Tensor c = matmul(a, b);
  CHECK(c.data()[0] == doctest::Approx(19).epsilon(1e-15));
  CHECK(c.data()[1] == doctest::Approx(22).epsilon(1e-15));
  CHECK(c.data()[2] == doctest::Approx(43).epsilon(1e-15));
  CHECK(c.data()[3] == doctest::Approx(50).epsilon(1e-15));
  CHECK_THROWS_AS(matmul(a, Tensor::zeros({3, 2})), ShapeError);
}

TEST_CASE("matmul gradients (rank 2 and rank 3 lhs)") {
  Rng rng(11);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  Tensor w = random_tensor({3, 2}, rng);
  CHECK(grad_check([&] { return weighted(matmul(a, b), w); }, {a, b}) < kFdTol);

  Tensor a3 = random_tensor({2, 3, 4}, rng);
  Tensor w3 = random_tensor({2, 3, 2}, rng);
  CHECK(grad_check([&] { return weighted(matmul(a3, b), w3); }, {a3, b}) < kFdTol);
}

TEST_CASE("matmul_nt equals matmul against the transpose") {
  Rng rng(12);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor bt = random_tensor({5, 4}, rng);  // rows are output features
  Tensor b = Tensor::zeros({4, 5});
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 4; ++j) b.data()[j * 5 + i] = bt.data()[i * 4 + j];
  Tensor y1 = matmul_nt(a, bt);
  Tensor y2 = matmul(a, b);
  CHECK(testsupport::rel_err(y1.data(), y2.data()) < 1e-14);

  Tensor w = random_tensor({3, 5}, rng);
  CHECK(grad_check([&] { return weighted(matmul_nt(a, bt), w); }, {a, bt}) < kFdTol);
}

TEST_CASE("batched matmuls") {
  Rng rng(13);
  Tensor a = random_tensor({2, 3, 4}, rng);
  Tensor b = random_tensor({2, 4, 2}, rng);
  Tensor w = random_tensor({2, 3, 2}, rng);
  CHECK(grad_check([&] { return weighted(bmm_nn(a, b), w); }, {a, b}) < kFdTol);

  Tensor bt = random_tensor({2, 5, 4}, rng);
  Tensor w2 = random_tensor({2, 3, 5}, rng);
  CHECK(grad_check([&] { return weighted(bmm_nt(a, bt), w2); }, {a, bt}) < kFdTol);

  // bmm_nn == per-batch matmul
  Tensor y = bmm_nn(a, b);
  for (int i = 0; i < 2; ++i) {
    Tensor ai = Tensor::from({3, 4}, {a.data().begin() + i * 12, a.data().begin() + (i + 1) * 12});
    Tensor bi = Tensor::from({4, 2}, {b.data().begin() + i * 8, b.data().begin() + (i + 1) * 8});
    Tensor yi = matmul(ai, bi);
    for (int j = 0; j < 6; ++j) CHECK(y.data()[i * 6 + j] == doctest::Approx(yi.data()[j]));
  }
  CHECK_THROWS_AS(bmm_nn(a, Tensor::zeros({3, 4, 2})), ShapeError);
}

TEST_CASE("elementwise ops") {
  Rng rng(14);
  Tensor a = random_tensor({4, 5}, rng);
  Tensor b = random_tensor({4, 5}, rng);
  Tensor w = random_tensor({4, 5}, rng);
  CHECK(grad_check([&] { return weighted(add(a, b), w); }, {a, b}) < kFdTol);
  CHECK(grad_check([&] { return weighted(mul(a, b), w); }, {a, b}) < kFdTol);
  CHECK(grad_check([&] { return weighted(scale(a, -1.7), w); }, {a}) < kFdTol);

  Tensor bias = random_tensor({5}, rng);
  CHECK(grad_check([&] { return weighted(add_bias(a, bias), w); }, {a, bias}) < kFdTol);
  CHECK_THROWS_AS(add(a, Tensor::zeros({5, 4})), ShapeError);
  CHECK_THROWS_AS(add_bias(a, Tensor::zeros({4})), ShapeError);
}

TEST_CASE("softmax values, properties, gradients") {
  Tensor x = Tensor::from({1, 3}, {1, 2, 3});
  Tensor y = softmax(x, -1);
  CHECK(y.data()[0] == doctest::Approx(0.0900305732).epsilon(1e-8));
  CHECK(y.data()[1] == doctest::Approx(0.2447284711).epsilon(1e-8));
  CHECK(y.data()[2] == doctest::Approx(0.6652409558).epsilon(1e-8));

  Rng rng(15);
  Tensor big = random_tensor({6, 9}, rng, 3.0);
  Tensor sm = softmax(big, -1);
  for (int r = 0; r < 6; ++r) {
    double s = 0.0;
    for (int c = 0; c < 9; ++c) s += sm.data()[r * 9 + c];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }

  // invariance to a constant shift of the logits
  Tensor shifted = big.clone();
  for (double& v : shifted.data()) v += 1000.0;
  Tensor sm2 = softmax(shifted, -1);
  CHECK(testsupport::rel_err(sm.data(), sm2.data()) < 1e-12);
  CHECK(sm2.all_finite());

  Tensor w = random_tensor({6, 9}, rng);
  CHECK(grad_check([&] { return weighted(softmax(big, -1), w); }, {big}) < kFdTol);

  // non-trailing axis takes the strided path
  Tensor t = random_tensor({3, 4}, rng);
  Tensor wt = random_tensor({3, 4}, rng);
  Tensor cols = softmax(t, 0);
  for (int c = 0; c < 4; ++c) {
    double s = 0.0;
    for (int r = 0; r < 3; ++r) s += cols.data()[r * 4 + c];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK(grad_check([&] { return weighted(softmax(t, 0), wt); }, {t}) < kFdTol);
  CHECK_THROWS_AS(softmax(t, 2), ShapeError);
}

TEST_CASE("layer_norm values and gradients") {
  Tensor gamma = Tensor::full({2}, 1.0);
  Tensor beta = Tensor::zeros({2});
  Tensor x = Tensor::from({1, 2}, {1, 3});
  Tensor y = layer_norm(x, gamma, beta);
  CHECK(y.data()[0] == doctest::Approx(-1.0).epsilon(1e-6));
  CHECK(y.data()[1] == doctest::Approx(1.0).epsilon(1e-6));

  // constant rows normalize to beta, no NaN
  Tensor flat = Tensor::full({1, 2}, 5.0);
  Tensor yf = layer_norm(flat, gamma, beta);
  CHECK(yf.all_finite());
  CHECK(yf.data()[0] == doctest::Approx(0.0));

  Rng rng(16);
  Tensor xr = random_tensor({4, 6}, rng);
  Tensor g = random_tensor({6}, rng, 0.5);
  Tensor b = random_tensor({6}, rng, 0.5);
  Tensor w = random_tensor({4, 6}, rng);
  CHECK(grad_check([&] { return weighted(layer_norm(xr, g, b), w); }, {xr, g, b}) < kFdTol);
}

TEST_CASE("gelu matches the Gaussian CDF form") {
  Tensor x = Tensor::from({3}, {0.0, 1.0, -1.0});
  Tensor y = gelu(x);
  CHECK(y.data()[0] == 0.0);
  CHECK(y.data()[1] == doctest::Approx(0.8413447461).epsilon(1e-9));
  CHECK(y.data()[2] == doctest::Approx(-0.1586552539).epsilon(1e-8));

  Rng rng(17);
  Tensor xr = random_tensor({11}, rng, 2.0);
  Tensor w = random_tensor({11}, rng);
  CHECK(grad_check([&] { return weighted(gelu(xr), w); }, {xr}) < kFdTol);
  CHECK(grad_check([&] { return weighted(tanh_act(xr), w); }, {xr}) < kFdTol);
}

TEST_CASE("dropout semantics") {
  Rng data_rng(18);
  Tensor x = random_tensor({8, 8}, data_rng);
  Rng r1(99);
  Tensor eval_out = dropout(x, 0.5, /*training=*/false, r1);
  CHECK(eval_out.storage() == x.storage());  // identity, shared storage
  Tensor p0 = dropout(x, 0.0, true, r1);
  CHECK(p0.storage() == x.storage());
  CHECK_THROWS_AS(dropout(x, 1.0, true, r1), ConfigError);
  CHECK_THROWS_AS(dropout(x, -0.1, true, r1), ConfigError);

  Rng r2(7);
  Tensor dropped = dropout(x, 0.25, true, r2);
  int zeros = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (dropped.data()[i] == 0.0) {
      ++zeros;
    } else {
      CHECK(dropped.data()[i] == doctest::Approx(x.data()[i] / 0.75).epsilon(1e-12));
    }
  }
  CHECK(zeros > 0);
  CHECK(zeros < 64);

  // identical seeds give identical masks
  Rng r3(7);
  Tensor again = dropout(x, 0.25, true, r3);
  CHECK(testsupport::rel_err(dropped.data(), again.data()) == 0.0);

  Rng wrng(19);
  Tensor w = random_tensor({8, 8}, wrng);
  auto build = [&] {
    Rng local(7);  // fresh stream per forward so finite differences see a fixed mask
    return weighted(dropout(x, 0.25, true, local), w);
  };
  CHECK(grad_check(build, {x}) < kFdTol);
}

TEST_CASE("embedding lookup with duplicate ids") {
  Tensor table = Tensor::from({4, 2}, {0, 1, 10, 11, 20, 21, 30, 31});
  std::vector<int> ids = {2, 0, 2};
  Tensor out = embedding_lookup(table, ids);
  CHECK(out.shape() == Shape{3, 2});
  CHECK(out.data()[0] == 20.0);
  CHECK(out.data()[2] == 0.0);
  CHECK(out.data()[4] == 20.0);

  Tensor out2 = embedding_lookup(table, ids, {3, 1});
  CHECK(out2.shape() == Shape{3, 1, 2});
  CHECK_THROWS_AS(embedding_lookup(table, ids, {2, 2}), ShapeError);
  std::vector<int> bad = {4};
  CHECK_THROWS_AS(embedding_lookup(table, bad), DataError);
  std::vector<int> neg = {-1};
  CHECK_THROWS_AS(embedding_lookup(table, neg), DataError);

  // duplicate ids accumulate in the scatter-add
  table.set_requires_grad(true);
  {
    Graph g;
    Tensor loss = sum(embedding_lookup(table, ids));
    g.backward(loss);
  }
  CHECK(table.grad()[2 * 2] == 2.0);  // row 2 hit twice
  CHECK(table.grad()[0] == 1.0);      // row 0 hit once
  CHECK(table.grad()[3 * 2] == 0.0);  // row 3 untouched
  table.set_requires_grad(false);

  Rng rng(20);
  Tensor big = random_tensor({7, 3}, rng);
  Tensor w = random_tensor({4, 3}, rng);
  std::vector<int> ids2 = {1, 5, 1, 0};
  CHECK(grad_check([&] { return weighted(embedding_lookup(big, ids2), w); }, {big}) < kFdTol);
}

TEST_CASE("head split/merge round trip") {
  Rng rng(21);
  Tensor x = random_tensor({2, 3, 8}, rng);
  Tensor h = split_heads(x, 4);
  CHECK(h.shape() == Shape{2, 4, 3, 2});
  Tensor back = merge_heads(h);
  CHECK(testsupport::rel_err(x.data(), back.data()) == 0.0);
  CHECK_THROWS_AS(split_heads(x, 3), ShapeError);

  Tensor w = random_tensor({2, 4, 3, 2}, rng);
  CHECK(grad_check([&] { return weighted(split_heads(x, 4), w); }, {x}) < kFdTol);
  Tensor w2 = random_tensor({2, 3, 8}, rng);
  Tensor h2 = random_tensor({2, 4, 3, 2}, rng);
  CHECK(grad_check([&] { return weighted(merge_heads(h2), w2); }, {h2}) < kFdTol);
}

TEST_CASE("key padding mask pushes attention off padded keys") {
  Rng rng(22);
  Tensor scores = random_tensor({1, 2, 3, 3}, rng);
  std::vector<std::uint8_t> mask = {1, 1, 0};  // last key padded
  Tensor masked = add_key_padding_mask(scores, mask);
  Tensor probs = softmax(masked, -1);
  for (int a = 0; a < 2; ++a) {
    for (int q = 0; q < 3; ++q) {
      CHECK(probs.data()[(a * 3 + q) * 3 + 2] < 1e-20);
    }
  }
  std::vector<std::uint8_t> short_mask = {1, 1};
  CHECK_THROWS_AS(add_key_padding_mask(scores, short_mask), ShapeError);

  // through softmax the -1e9 offsets cancel, keeping the loss O(1) for FD
  Tensor w = random_tensor({1, 2, 3, 3}, rng);
  CHECK(grad_check(
            [&] { return weighted(softmax(add_key_padding_mask(scores, mask), -1), w); },
            {scores}) < kFdTol);
}

TEST_CASE("first_token picks position zero") {
  Rng rng(23);
  Tensor x = random_tensor({2, 3, 4}, rng);
  Tensor y = first_token(x);
  CHECK(y.shape() == Shape{2, 4});
  for (int b = 0; b < 2; ++b)
    for (int h = 0; h < 4; ++h) CHECK(y.data()[b * 4 + h] == x.data()[b * 12 + h]);
  Tensor w = random_tensor({2, 4}, rng);
  CHECK(grad_check([&] { return weighted(first_token(x), w); }, {x}) < kFdTol);
}

TEST_CASE("cross entropy values, ignored rows, gradients") {
  // uniform logits over K classes cost ln K
  Tensor logits = Tensor::zeros({1, 2});
  std::vector<int> t0 = {0};
  CHECK(cross_entropy_logits(logits, t0).item() == doctest::Approx(0.6931471805599453).epsilon(1e-12));

  Tensor u5 = Tensor::full({3, 5}, 0.42);
  std::vector<int> t5 = {0, 4, 2};
  CHECK(cross_entropy_logits(u5, t5).item() == doctest::Approx(std::log(5.0)).epsilon(1e-12));

  // ignored rows do not count toward the mean
  Rng rng(24);
  Tensor lr = random_tensor({3, 4}, rng);
  std::vector<int> mixed = {2, kIgnoreIndex, 1};
  std::vector<int> kept = {2, 1};
  Tensor kept_logits = Tensor::zeros({2, 4});
  for (int j = 0; j < 4; ++j) {
    kept_logits.data()[j] = lr.data()[j];
    kept_logits.data()[4 + j] = lr.data()[8 + j];
  }
  CHECK(cross_entropy_logits(lr, mixed).item() ==
        doctest::Approx(cross_entropy_logits(kept_logits, kept).item()).epsilon(1e-12));

  bool all_ignored = false;
  std::vector<int> skip = {kIgnoreIndex, kIgnoreIndex, kIgnoreIndex};
  Tensor z = cross_entropy_logits(lr, skip, kIgnoreIndex, &all_ignored);
  CHECK(all_ignored);
  CHECK(z.item() == 0.0);

  std::vector<int> bad = {7, 0, 0};
  CHECK_THROWS_AS(cross_entropy_logits(lr, bad), DataError);
  std::vector<int> short_targets = {0};
  CHECK_THROWS_AS(cross_entropy_logits(lr, short_targets), ShapeError);

  CHECK(grad_check([&] { return cross_entropy_logits(lr, mixed); }, {lr}) < kFdTol);

  // gradient of ignored rows stays zero
  lr.set_requires_grad(true);
  lr.zero_grad();
  {
    Graph g;
    g.backward(cross_entropy_logits(lr, mixed));
  }
  for (int j = 0; j < 4; ++j) CHECK(lr.grad()[4 + j] == 0.0);
  lr.set_requires_grad(false);
}

TEST_CASE("graph discipline") {
  Tensor x = Tensor::from({2}, {1.0, 2.0}, /*requires_grad=*/true);

  // no graph: forward works, nothing recorded
  Tensor y = sum(scale(x, 2.0));
  CHECK(y.item() == 6.0);
  CHECK_THROWS_AS(backward(y), UsageError);

  {
    Graph g;
    Tensor loss = sum(scale(x, 2.0));
    CHECK(g.num_ops() == 2);
    g.backward(loss);
    CHECK(x.grad()[0] == 2.0);
    CHECK(x.grad()[1] == 2.0);
    CHECK_THROWS_AS(g.backward(loss), UsageError);  // one backward per forward
  }

  // gradients accumulate across graphs until zeroed
  {
    Graph g;
    g.backward(sum(scale(x, 2.0)));
  }
  CHECK(x.grad()[0] == 4.0);
  x.zero_grad();
  CHECK(x.grad()[0] == 0.0);

  {
    Graph g;
    Tensor vec = scale(x, 1.0);
    CHECK_THROWS_AS(g.backward(vec), UsageError);  // non-scalar loss
    Tensor foreign = Tensor::scalar(1.0);
    CHECK_THROWS_AS(g.backward(foreign), UsageError);  // not produced here
  }

  // untracked inputs record nothing
  Tensor plain = Tensor::from({2}, {3.0, 4.0});
  {
    Graph g;
    Tensor loss = sum(scale(plain, 2.0));
    CHECK(g.num_ops() == 0);
    CHECK_THROWS_AS(g.backward(loss), UsageError);
  }
}

TEST_CASE("rng determinism and distributions") {
  Rng a(123), b(123), c(124);
  bool same = true, diff = false;
  for (int i = 0; i < 64; ++i) {
    std::uint64_t va = a.next_u64();
    same = same && (va == b.next_u64());
    diff = diff || (va != c.next_u64());
  }
  CHECK(same);
  CHECK(diff);

  Rng s1 = Rng::stream(5, 1), s2 = Rng::stream(5, 2), s1b = Rng::stream(5, 1);
  CHECK(s1.next_u64() == s1b.next_u64());
  CHECK(s1.next_u64() != s2.next_u64());

  Rng r(42);
  double mean = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) mean += r.uniform();
  mean /= n;
  CHECK(mean == doctest::Approx(0.5).epsilon(0.02));

  for (int i = 0; i < 1000; ++i) {
    auto v = r.uniform_int(3, 7);
    CHECK(v >= 3);
    CHECK(v <= 7);
  }
  CHECK_THROWS_AS(r.uniform_int(5, 4), UsageError);

  double m2 = 0.0;
  for (int i = 0; i < n; ++i) {
    double z = r.normal();
    m2 += z * z;
  }
  CHECK(m2 / n == doctest::Approx(1.0).epsilon(0.05));

  for (int i = 0; i < 1000; ++i) CHECK(std::abs(r.truncated_normal(0.02)) <= 0.04 + 1e-12);
}
