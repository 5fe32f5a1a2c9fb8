#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "chatnmt/error.hpp"
#include "chatnmt/tensor.hpp"

using namespace chatnmt;

// ---------------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------------

// Reference matmul: plain triple loop, no transposes, no batching. The
// library result must agree with this on every case we can express.
static std::vector<double> matmul_ref(const std::vector<double>& a, const std::vector<double>& b,
                                      int m, int k, int n) {
    std::vector<double> c(static_cast<size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p)
            for (int j = 0; j < n; ++j)
                c[i * n + j] += a[i * k + p] * b[p * n + j];
    return c;
}

// Central finite difference of a scalar-valued forward function w.r.t. one
// element of a leaf tensor.
static double fd_grad(Tensor& leaf, size_t i, const std::function<double()>& loss,
                      double h = 1e-5) {
    const double orig = leaf.mutable_data()[i];
    leaf.mutable_data()[i] = orig + h;
    const double up = loss();
    leaf.mutable_data()[i] = orig - h;
    const double dn = loss();
    leaf.mutable_data()[i] = orig;
    return (up - dn) / (2.0 * h);
}

// Runs backward once, then checks every element of every leaf against the
// finite-difference oracle.
static void check_grads(std::vector<Tensor> leaves, const std::function<Tensor()>& forward,
                        double tol = 1e-4) {
    for (auto& l : leaves) l.zero_grad();
    Tensor loss = forward();
    backward(loss);
    auto scalar_loss = [&]() { return forward().item(); };
    for (auto& l : leaves) {
        REQUIRE(l.has_grad());
        for (size_t i = 0; i < l.numel(); ++i) {
            const double fd = fd_grad(l, i, scalar_loss);
            const double ad = l.grad()[i];
            const double err = std::abs(fd - ad);
            const double denom = std::max({std::abs(fd), std::abs(ad), 1.0});
            INFO("element " << i << " fd=" << fd << " ad=" << ad);
            CHECK(err <= tol * denom);
        }
    }
}

static Tensor leaf(std::vector<double> v, std::vector<int> shape) {
    return Tensor::from_data(std::move(v), std::move(shape), /*requires_grad=*/true);
}

// ---------------------------------------------------------------------------
// Construction and plumbing
// ---------------------------------------------------------------------------

TEST_CASE("factories and accessors") {
    Tensor z = Tensor::zeros({2, 3});
    CHECK(z.numel() == 6);
    CHECK(z.shape() == std::vector<int>{2, 3});
    for (double v : z.data()) CHECK(v == 0.0);

    Tensor f = Tensor::full({2}, 1.5);
    CHECK(f.data()[0] == 1.5);
    CHECK(f.data()[1] == 1.5);

    CHECK(Tensor::scalar(4.0).item() == 4.0);
    CHECK_THROWS_AS(Tensor::from_data({1, 2, 3}, {2, 2}), ShapeError);
    CHECK_THROWS_AS(Tensor::zeros({2, 2}).item(), ContractError);
}

TEST_CASE("randn is reproducible from the seed") {
    Rng r1(7), r2(7), r3(8);
    Tensor a = Tensor::randn({4, 4}, r1);
    Tensor b = Tensor::randn({4, 4}, r2);
    Tensor c = Tensor::randn({4, 4}, r3);
    for (size_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);
    bool any_diff = false;
    for (size_t i = 0; i < a.numel(); ++i) any_diff |= (a.data()[i] != c.data()[i]);
    CHECK(any_diff);
}

TEST_CASE("rng child streams are independent of draw position") {
    Rng a(42);
    (void)a.normal();
    (void)a.normal();
    Rng b(42);
    CHECK(a.child(3).normal() == b.child(3).normal());
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

TEST_CASE("elementwise forward") {
    Tensor a = Tensor::from_data({1, 2, 3, 4}, {2, 2});
    Tensor b = Tensor::from_data({10, 20, 30, 40}, {2, 2});
    CHECK(add(a, b).data()[3] == 44.0);
    CHECK(sub(a, b).data()[0] == -9.0);
    CHECK(mul(a, b).data()[2] == 90.0);
    CHECK(div(b, a).data()[1] == 10.0);
    CHECK(scale(a, -2.0).data()[1] == -4.0);
    CHECK(add_const(a, 0.5).data()[0] == 1.5);
    CHECK_THROWS_AS(add(a, Tensor::zeros({3})), ShapeError);
}

TEST_CASE("suffix broadcast adds a row vector to every row") {
    Tensor a = Tensor::from_data({1, 2, 3, 4, 5, 6}, {2, 3});
    Tensor bias = Tensor::from_data({10, 20, 30}, {3});
    Tensor y = add(a, bias);
    CHECK(y.data()[0] == 11.0);
    CHECK(y.data()[5] == 36.0);
    CHECK_THROWS_AS(add(bias, a), ShapeError);  // broadcast only widens the left side
}

TEST_CASE("elementwise gradients vs finite differences") {
    Tensor a = leaf({0.5, -1.2, 2.0, 0.3}, {2, 2});
    Tensor b = leaf({1.5, 0.7, -0.4, 2.2}, {2, 2});
    check_grads({a, b}, [&] { return sum_all(mul(add(a, b), sub(a, b))); });
    check_grads({a, b}, [&] { return sum_all(div(a, b)); });

    Tensor bias = leaf({0.2, -0.6}, {2});
    Tensor m = leaf({1.0, 2.0, 3.0, 4.0}, {2, 2});
    check_grads({m, bias}, [&] { return sum_all(mul(add(m, bias), add(m, bias))); });
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

TEST_CASE("matmul matches the reference kernel") {
    std::vector<double> av = {1, 2, 3, 4, 5, 6};          // 2x3
    std::vector<double> bv = {7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18};  // 3x4
    Tensor a = Tensor::from_data(av, {2, 3});
    Tensor b = Tensor::from_data(bv, {3, 4});
    Tensor c = matmul(a, b);
    auto ref = matmul_ref(av, bv, 2, 3, 4);
    REQUIRE(c.shape() == std::vector<int>{2, 4});
    for (size_t i = 0; i < ref.size(); ++i) CHECK(c.data()[i] == ref[i]);

    // d sum(C) / d a[i][k] is b's k-th row summed, independent of i
    Tensor a2 = leaf(av, {2, 3});
    backward(sum_all(matmul(a2, b)));
    for (int i = 0; i < 2; ++i)
        for (int k = 0; k < 3; ++k) {
            double row_sum = bv[k * 4] + bv[k * 4 + 1] + bv[k * 4 + 2] + bv[k * 4 + 3];
            CHECK(a2.grad()[i * 3 + k] == row_sum);
        }
}

TEST_CASE("matmul transpose flags") {
    // effective product: (2x3) * (3x2)
    std::vector<double> av = {1, 4, 2, 5, 3, 6};     // stored 3x2 = A^T
    std::vector<double> bv = {7, 9, 11, 8, 10, 12};  // stored 2x3 = B^T
    Tensor at = Tensor::from_data(av, {3, 2});
    Tensor bt = Tensor::from_data(bv, {2, 3});
    Tensor c = matmul(at, bt, /*transpose_a=*/true, /*transpose_b=*/true);
    auto ref = matmul_ref({1, 2, 3, 4, 5, 6}, {7, 8, 9, 10, 11, 12}, 2, 3, 2);
    REQUIRE(c.shape() == std::vector<int>{2, 2});
    for (size_t i = 0; i < ref.size(); ++i) CHECK(c.data()[i] == ref[i]);

    CHECK_THROWS_AS(matmul(Tensor::zeros({3, 2}), Tensor::zeros({3, 4})), ShapeError);
    CHECK_THROWS_AS(matmul(Tensor::zeros({3, 2}), Tensor::zeros({2, 4}), true, false), ShapeError);
}

TEST_CASE("batched matmul applies the rank-2 rhs to every slice") {
    Rng rng(1);
    Tensor a = Tensor::randn({2, 3, 4}, rng);
    Tensor w = Tensor::randn({4, 5}, rng);
    Tensor c = matmul(a, w);
    REQUIRE(c.shape() == std::vector<int>{2, 3, 5});
    for (int s = 0; s < 2; ++s) {
        std::vector<double> slice(a.data().begin() + s * 12, a.data().begin() + (s + 1) * 12);
        auto ref = matmul_ref(slice, {w.data().begin(), w.data().end()}, 3, 4, 5);
        for (int i = 0; i < 15; ++i) CHECK(c.data()[s * 15 + i] == doctest::Approx(ref[i]).epsilon(1e-12));
    }
}

TEST_CASE("matmul gradients vs finite differences, all flag combinations") {
    Tensor a23 = leaf({0.1, -0.4, 0.9, 1.3, -0.2, 0.5}, {2, 3});
    Tensor b34 = leaf({0.3, 1.1, -0.7, 0.2, 0.8, -0.5, 0.6, 0.4, -1.2, 0.9, 0.1, -0.3}, {3, 4});
    check_grads({a23, b34}, [&] { return sum_all(matmul(a23, b34)); });

    Tensor a32 = leaf({0.1, 1.3, -0.4, -0.2, 0.9, 0.5}, {3, 2});
    check_grads({a32, b34}, [&] { return sum_all(matmul(a32, b34, true, false)); });

    Tensor b43 = leaf({0.3, 0.2, 0.6, 1.1, 0.8, 0.4, -0.7, -0.5, -1.2, 0.9, 0.1, -0.3}, {4, 3});
    check_grads({a23, b43}, [&] { return sum_all(matmul(a23, b43, false, true)); });
    check_grads({a32, b43}, [&] { return sum_all(matmul(a32, b43, true, true)); });

    // nonuniform downstream gradient so dC is not all ones
    Tensor w = Tensor::from_data({1, -2, 3, -4, 5, -6, 7, -8}, {2, 4});
    check_grads({a23, b34}, [&] { return sum_all(mul(matmul(a23, b34), w)); });
}

TEST_CASE("batched matmul gradients, including shared rank-2 rhs") {
    Tensor a = leaf({0.5, -0.1, 0.2, 0.7, 1.1, -0.8, 0.4, 0.3, -0.6, 0.9, 0.0, 1.2}, {2, 3, 2});
    Tensor w = leaf({0.3, -0.9, 1.4, 0.2}, {2, 2});
    check_grads({a, w}, [&] { return sum_all(matmul(a, w)); });

    Tensor b = leaf({1.0, 0.5, -0.5, 0.25, 2.0, -1.0, 0.75, -0.25, 0.6, -0.4, 1.3, 0.8}, {2, 3, 2});
    check_grads({a, b}, [&] { return sum_all(matmul(a, b, true, false)); });
}

// ---------------------------------------------------------------------------
// softmax family
// ---------------------------------------------------------------------------

TEST_CASE("softmax of a constant row is uniform") {
    Tensor x = Tensor::from_data({0, 0}, {1, 2});
    Tensor p = softmax_last_dim(x);
    CHECK(p.data()[0] == 0.5);
    CHECK(p.data()[1] == 0.5);
}

TEST_CASE("softmax rows sum to one and shift invariance holds") {
    Tensor x = Tensor::from_data({0.3, -1.2, 2.0, 0.1, 0.1, 0.1}, {2, 3});
    Tensor p = softmax_last_dim(x);
    for (int r = 0; r < 2; ++r) {
        double s = p.data()[r * 3] + p.data()[r * 3 + 1] + p.data()[r * 3 + 2];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    Tensor y = softmax_last_dim(add_const(x, 100.0));
    for (size_t i = 0; i < p.numel(); ++i)
        CHECK(p.data()[i] == doctest::Approx(y.data()[i]).epsilon(1e-12));
}

TEST_CASE("log_softmax equals log of softmax") {
    Tensor x = Tensor::from_data({1.5, -0.5, 0.25, 3.0}, {1, 4});
    Tensor lp = log_softmax_last_dim(x);
    Tensor p = softmax_last_dim(x);
    for (size_t i = 0; i < 4; ++i)
        CHECK(lp.data()[i] == doctest::Approx(std::log(p.data()[i])).epsilon(1e-12));
}

TEST_CASE("masked softmax zeroes masked entries exactly and renormalizes") {
    Tensor x = Tensor::from_data({1.0, 5.0, 2.0, -3.0}, {1, 4});
    Tensor m = Tensor::from_data({1, 0, 1, 1}, {1, 4});
    Tensor p = masked_softmax_last_dim(x, m);
    CHECK(p.data()[1] == 0.0);  // exact, not tiny
    Tensor sub3 = softmax_last_dim(Tensor::from_data({1.0, 2.0, -3.0}, {1, 3}));
    CHECK(p.data()[0] == doctest::Approx(sub3.data()[0]).epsilon(1e-12));
    CHECK(p.data()[2] == doctest::Approx(sub3.data()[1]).epsilon(1e-12));
    CHECK(p.data()[3] == doctest::Approx(sub3.data()[2]).epsilon(1e-12));

    Tensor all_masked = Tensor::from_data({0, 0, 0, 0}, {1, 4});
    CHECK_THROWS_AS(masked_softmax_last_dim(x, all_masked), DomainError);
}

TEST_CASE("softmax gradients vs finite differences") {
    Tensor x = leaf({0.4, -1.1, 0.9, 2.2, 0.0, -0.7}, {2, 3});
    Tensor w = Tensor::from_data({1, 2, 3, -1, -2, -3}, {2, 3});
    check_grads({x}, [&] { return sum_all(mul(softmax_last_dim(x), w)); });
    check_grads({x}, [&] { return sum_all(mul(log_softmax_last_dim(x), w)); });

    Tensor m = Tensor::from_data({1, 1, 0, 1, 1, 1}, {2, 3});
    check_grads({x}, [&] { return sum_all(mul(masked_softmax_last_dim(x, m), w)); });
}

// ---------------------------------------------------------------------------
// pointwise nonlinearities
// ---------------------------------------------------------------------------

TEST_CASE("softplus values and stability") {
    Tensor x = Tensor::from_data({0.0, 1000.0, -1000.0}, {3});
    Tensor y = softplus(x);
    CHECK(y.data()[0] == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    CHECK(y.data()[1] == 1000.0);
    CHECK(y.data()[2] == 0.0);
    CHECK(std::isfinite(y.data()[1]));
}

TEST_CASE("pointwise gradients vs finite differences") {
    Tensor x = leaf({0.8, -0.3, 1.7, -2.1}, {4});
    check_grads({x}, [&] { return sum_all(tanh(x)); });
    check_grads({x}, [&] { return sum_all(softplus(x)); });
    check_grads({x}, [&] { return sum_all(exp(x)); });
    Tensor pos = leaf({0.5, 1.5, 2.5}, {3});
    check_grads({pos}, [&] { return sum_all(log(pos)); });
    Tensor away_from_kink = leaf({0.8, -0.3, 1.7, -2.1}, {4});
    check_grads({away_from_kink}, [&] { return sum_all(mul(relu(away_from_kink), away_from_kink)); });
}

TEST_CASE("softplus gradient at zero is one half") {
    Tensor x = leaf({0.0}, {1});
    Tensor y = sum_all(softplus(x));
    backward(y);
    CHECK(x.grad()[0] == 0.5);
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

TEST_CASE("concat and slice round trip") {
    Tensor a = leaf({1, 2, 3, 4}, {2, 2});
    Tensor b = leaf({5, 6, 7, 8, 9, 10}, {2, 3});
    Tensor c = concat_last_dim({a, b});
    REQUIRE(c.shape() == std::vector<int>{2, 5});
    std::vector<double> want = {1, 2, 5, 6, 7, 3, 4, 8, 9, 10};
    for (size_t i = 0; i < want.size(); ++i) CHECK(c.data()[i] == want[i]);

    Tensor back = slice_last_dim(c, 2, 3);
    for (size_t i = 0; i < 6; ++i) CHECK(back.data()[i] == b.data()[i]);

    CHECK_THROWS_AS(slice_last_dim(c, 3, 4), ShapeError);
    CHECK_THROWS_AS(concat_last_dim({a, Tensor::zeros({3, 2})}), ShapeError);

    Tensor w = Tensor::from_data({1, -1, 2, -2, 3, -3, 4, -4, 5, -5}, {2, 5});
    check_grads({a, b}, [&] { return sum_all(mul(concat_last_dim({a, b}), w)); });
    check_grads({a, b}, [&] { return sum_all(mul(slice_last_dim(concat_last_dim({a, b}), 1, 3),
                                                 Tensor::from_data({1, 2, 3, 4, 5, 6}, {2, 3}))); });
}

TEST_CASE("reshape and permute") {
    Tensor x = leaf({1, 2, 3, 4, 5, 6}, {2, 3});
    Tensor r = reshape(x, {3, 2});
    CHECK(r.data()[4] == 5.0);
    CHECK_THROWS_AS(reshape(x, {4, 2}), ShapeError);

    Tensor t = permute(x, {1, 0});
    REQUIRE(t.shape() == std::vector<int>{3, 2});
    // transpose: t[i][j] == x[j][i]
    std::vector<double> want = {1, 4, 2, 5, 3, 6};
    for (size_t i = 0; i < 6; ++i) CHECK(t.data()[i] == want[i]);
    CHECK_THROWS_AS(permute(x, {0, 0}), ShapeError);

    Tensor w = Tensor::from_data({1, 2, 3, 4, 5, 6}, {3, 2});
    check_grads({x}, [&] { return sum_all(mul(permute(x, {1, 0}), w)); });

    // rank-4 permute as used for attention head split
    Tensor h = leaf({1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12}, {1, 2, 3, 2});
    Tensor hp = permute(h, {0, 2, 1, 3});
    REQUIRE(hp.shape() == std::vector<int>{1, 3, 2, 2});
    CHECK(hp.data()[0] == 1.0);
    CHECK(hp.data()[2] == 7.0);  // [0,0,1,0] <- h[0,1,0,0]
    Tensor w4 = Tensor::from_data({2, -1, 4, -3, 6, -5, 8, -7, 10, -9, 12, -11}, {1, 3, 2, 2});
    check_grads({h}, [&] { return sum_all(mul(permute(h, {0, 2, 1, 3}), w4)); });
}

TEST_CASE("tile_dim1 replicates rows and sums gradients") {
    Tensor x = leaf({1, 2, 3, 4}, {2, 2});
    Tensor t = tile_dim1(x, 3);
    REQUIRE(t.shape() == std::vector<int>{2, 3, 2});
    for (int r = 0; r < 3; ++r) {
        CHECK(t.data()[r * 2] == 1.0);
        CHECK(t.data()[6 + r * 2 + 1] == 4.0);
    }
    Tensor y = sum_all(t);
    backward(y);
    CHECK(x.grad()[0] == 3.0);

    Tensor w = Tensor::from_data({1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12}, {2, 3, 2});
    check_grads({x}, [&] { return sum_all(mul(tile_dim1(x, 3), w)); });
}

// ---------------------------------------------------------------------------
// pooling, norm, dropout, lookup
// ---------------------------------------------------------------------------

TEST_CASE("mean_masked averages only unmasked positions") {
    // (2, 3, 2) with mask picking 2 rows in group 0 and 1 row in group 1
    Tensor x = Tensor::from_data({1, 2, 3, 4, 100, 100, 5, 6, 7, 8, 9, 10}, {2, 3, 2});
    Tensor m = Tensor::from_data({1, 1, 0, 0, 1, 0}, {2, 3});
    Tensor y = mean_masked(x, m);
    REQUIRE(y.shape() == std::vector<int>{2, 2});
    CHECK(y.data()[0] == 2.0);
    CHECK(y.data()[1] == 3.0);
    CHECK(y.data()[2] == 7.0);
    CHECK(y.data()[3] == 8.0);

    Tensor none = Tensor::from_data({0, 0, 0, 1, 1, 1}, {2, 3});
    CHECK_THROWS_AS(mean_masked(x, none), ContractError);
}

TEST_CASE("mean_masked gradients vs finite differences") {
    Tensor x = leaf({0.3, -0.8, 1.2, 0.4, 2.0, -1.5, 0.1, 0.9, -0.2, 1.1, 0.6, -0.4}, {2, 3, 2});
    Tensor m = Tensor::from_data({1, 1, 0, 1, 1, 1}, {2, 3});
    Tensor w = Tensor::from_data({1, -2, 3, -4}, {2, 2});
    check_grads({x}, [&] { return sum_all(mul(mean_masked(x, m), w)); });
}

TEST_CASE("layer_norm standardizes each row") {
    Tensor x = Tensor::from_data({1, 2, 3, 4, 10, 20, 30, 40}, {2, 4});
    Tensor g = Tensor::full({4}, 1.0);
    Tensor b = Tensor::zeros({4});
    Tensor y = layer_norm(x, g, b);
    for (int r = 0; r < 2; ++r) {
        double mean = 0, var = 0;
        for (int j = 0; j < 4; ++j) mean += y.data()[r * 4 + j];
        mean /= 4;
        for (int j = 0; j < 4; ++j) {
            double c = y.data()[r * 4 + j] - mean;
            var += c * c;
        }
        var /= 4;
        CHECK(mean == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(var == doctest::Approx(1.0).epsilon(1e-4));  // eps in denominator shifts it slightly
    }
    // hand value: row [1,2,3,4], mean 2.5, var 1.25
    double want = (1.0 - 2.5) / std::sqrt(1.25 + 1e-6);
    CHECK(y.data()[0] == doctest::Approx(want).epsilon(1e-12));
    CHECK_THROWS_AS(layer_norm(x, Tensor::zeros({3}), b), ShapeError);
}

TEST_CASE("layer_norm gradients vs finite differences") {
    Tensor x = leaf({0.5, -1.0, 2.0, 0.1, 1.5, 0.7, -0.3, 0.9}, {2, 4});
    Tensor g = leaf({1.1, 0.9, 1.3, 0.8}, {4});
    Tensor b = leaf({0.1, -0.2, 0.05, 0.3}, {4});
    Tensor w = Tensor::from_data({1, -1, 2, -2, 3, -3, 4, -4}, {2, 4});
    check_grads({x, g, b}, [&] { return sum_all(mul(layer_norm(x, g, b), w)); });
}

TEST_CASE("dropout is identity when disabled and unbiased when on") {
    Rng rng(5);
    Tensor x = Tensor::full({1000}, 1.0);
    Tensor off = dropout(x, 0.5, /*training=*/false, rng);
    CHECK(off.node() == x.node());
    Tensor zero_rate = dropout(x, 0.0, true, rng);
    CHECK(zero_rate.node() == x.node());

    Tensor on = dropout(x, 0.5, true, rng);
    double sum = 0.0;
    int zeros = 0;
    for (double v : on.data()) {
        CHECK((v == 0.0 || v == 2.0));
        sum += v;
        zeros += (v == 0.0);
    }
    CHECK(zeros > 400);
    CHECK(zeros < 600);
    CHECK(sum / 1000.0 == doctest::Approx(1.0).epsilon(0.1));
    CHECK_THROWS_AS(dropout(x, 1.0, true, rng), ContractError);
}

TEST_CASE("embedding lookup gathers rows and scatters gradients") {
    Tensor table = leaf({1, 2, 3, 4, 5, 6}, {3, 2});
    Tensor e = embedding_lookup(table, {2, 0, 2}, {3});
    REQUIRE(e.shape() == std::vector<int>{3, 2});
    CHECK(e.data()[0] == 5.0);
    CHECK(e.data()[2] == 1.0);
    CHECK(e.data()[5] == 6.0);
    CHECK_THROWS_AS(embedding_lookup(table, {3}, {1}), ValidationError);
    CHECK_THROWS_AS(embedding_lookup(table, {-1}, {1}), ValidationError);

    backward(sum_all(e));
    CHECK(table.grad()[4] == 2.0);  // row 2 used twice
    CHECK(table.grad()[2] == 0.0);  // row 1 unused

    table.zero_grad();
    Tensor w = Tensor::from_data({1, 2, 3, 4, 5, 6}, {3, 2});
    check_grads({table}, [&] { return sum_all(mul(embedding_lookup(table, {2, 0, 2}, {3}), w)); });
}

TEST_CASE("gather_last_dim picks one entry per row") {
    Tensor x = leaf({1, 2, 3, 4, 5, 6}, {2, 3});
    Tensor g = gather_last_dim(x, {2, 0});
    REQUIRE(g.shape() == std::vector<int>{2});
    CHECK(g.data()[0] == 3.0);
    CHECK(g.data()[1] == 4.0);
    CHECK_THROWS_AS(gather_last_dim(x, {3, 0}), ValidationError);
    CHECK_THROWS_AS(gather_last_dim(x, {0}), ShapeError);

    Tensor w = Tensor::from_data({5, 7}, {2});
    check_grads({x}, [&] { return sum_all(mul(gather_last_dim(x, {2, 0}), w)); });
}

TEST_CASE("sums") {
    Tensor x = leaf({1, 2, 3, 4, 5, 6}, {2, 3});
    Tensor s = sum_last_dim(x);
    CHECK(s.data()[0] == 6.0);
    CHECK(s.data()[1] == 15.0);
    CHECK(sum_all(x).item() == 21.0);
    check_grads({x}, [&] { return sum_all(mul(sum_last_dim(x), Tensor::from_data({2, 3}, {2}))); });
}

// ---------------------------------------------------------------------------
// tape mechanics
// ---------------------------------------------------------------------------

TEST_CASE("backward requires a scalar") {
    Tensor x = leaf({1, 2}, {2});
    CHECK_THROWS_AS(backward(add(x, x)), ContractError);
}

TEST_CASE("gradients accumulate across backward calls and shared leaves") {
    Tensor x = leaf({3.0}, {1});
    Tensor y = mul(x, x);
    backward(y);
    CHECK(x.grad()[0] == 6.0);
    Tensor y2 = mul(x, x);
    backward(y2);  // no zeroing in between
    CHECK(x.grad()[0] == 12.0);
    x.zero_grad();
    CHECK(x.grad()[0] == 0.0);
}

TEST_CASE("diamond-shaped graph sums both paths") {
    Tensor x = leaf({2.0}, {1});
    Tensor a = mul(x, x);        // x^2
    Tensor b = add(a, x);        // x^2 + x
    Tensor y = mul(a, b);        // x^4 + x^3
    backward(y);
    // d/dx = 4x^3 + 3x^2 = 32 + 12
    CHECK(x.grad()[0] == doctest::Approx(44.0).epsilon(1e-12));
}

TEST_CASE("three-layer mlp gradient vs finite differences") {
    Rng rng(11);
    Tensor x = Tensor::randn({2, 3}, rng, 0.7, true);
    Tensor w1 = Tensor::randn({4, 3}, rng, 0.5, true);
    Tensor b1 = Tensor::randn({4}, rng, 0.1, true);
    Tensor w2 = Tensor::randn({4, 4}, rng, 0.5, true);
    Tensor b2 = Tensor::randn({4}, rng, 0.1, true);
    Tensor w3 = Tensor::randn({2, 4}, rng, 0.5, true);

    auto forward = [&] {
        Tensor h1 = tanh(add(matmul(x, w1, false, true), b1));
        Tensor h2 = relu(add(matmul(h1, w2, false, true), b2));
        Tensor logits = matmul(h2, w3, false, true);
        Tensor lp = log_softmax_last_dim(logits);
        return scale(sum_all(gather_last_dim(lp, {1, 0})), -1.0);
    };
    check_grads({x, w1, b1, w2, b2, w3}, forward);
}
