#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "matchseg/rng.hpp"
#include "matchseg/tensor.hpp"

using namespace matchseg;

namespace {

Tensor random_tensor(Shape shape, RngStream& rng, double lo = -1.0, double hi = 1.0,
                     bool requires_grad = false) {
    std::vector<float> data(shape_numel(shape));
    for (float& v : data) v = static_cast<float>(rng.uniform(lo, hi));
    return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

double max_rel_err(std::span<const float> got, std::span<const double> want) {
    double err = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i) {
        const double denom = std::max({std::abs(double(got[i])), std::abs(want[i]), 1e-8});
        err = std::max(err, std::abs(double(got[i]) - want[i]) / denom);
    }
    return err;
}

} // namespace

TEST_CASE("conv2d identity 1x1 kernel") {
    RngStream rng(11);
    Tensor x = random_tensor({3, 4, 5}, rng);
    // identity matrix over channels
    std::vector<float> w(3 * 3, 0.0f);
    for (int i = 0; i < 3; ++i) w[static_cast<std::size_t>(i) * 3 + i] = 1.0f;
    Tensor weight = Tensor::from_data({3, 3, 1, 1}, std::move(w));
    Tensor bias = Tensor::zeros({3});
    Tensor y = conv2d(x, weight, bias);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.values()[i] == x.values()[i]);
}

TEST_CASE("conv2d zero weights give zero output") {
    RngStream rng(12);
    Tensor x = random_tensor({2, 6, 6}, rng);
    Tensor y = conv2d(x, Tensor::zeros({4, 2, 3, 3}), Tensor::zeros({4}));
    for (float v : y.values()) CHECK(v == 0.0f);
}

TEST_CASE("conv2d matches quadruple-loop oracle") {
    RngStream rng(13);
    Tensor x = random_tensor({3, 5, 5}, rng);
    // batch-free 2x3x5x5 case from a second seed as well
    Tensor w = random_tensor({4, 3, 3, 3}, rng);
    Tensor b = random_tensor({4}, rng);
    Tensor y = conv2d(x, w, b);

    std::vector<double> want(4 * 5 * 5, 0.0);
    for (int oc = 0; oc < 4; ++oc)
        for (int yy = 0; yy < 5; ++yy)
            for (int xx = 0; xx < 5; ++xx) {
                double acc = b.values()[oc];
                for (int ic = 0; ic < 3; ++ic)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            const int sy = yy + ky - 1, sx = xx + kx - 1;
                            if (sy < 0 || sy >= 5 || sx < 0 || sx >= 5) continue;
                            acc += double(x.values()[(ic * 5 + sy) * 5 + sx]) *
                                   double(w.values()[((oc * 3 + ic) * 3 + ky) * 3 + kx]);
                        }
                want[(oc * 5 + yy) * 5 + xx] = acc;
            }
    CHECK(max_rel_err(y.values(), want) < 1e-5);
}

TEST_CASE("conv2d rejects channel mismatch") {
    Tensor x = Tensor::zeros({3, 4, 4});
    CHECK_THROWS_AS(conv2d(x, Tensor::zeros({2, 4, 3, 3}), Tensor::zeros({2})), shape_error);
}

TEST_CASE("leaky_relu values and gradient") {
    Tensor x = Tensor::from_data({2}, {1.0f, -1.0f});
    Tensor y = leaky_relu(x, 0.01f);
    CHECK(y.values()[0] == doctest::Approx(1.0f));
    CHECK(y.values()[1] == doctest::Approx(-0.01f));

    RngStream rng(14);
    Tensor pos = random_tensor({10}, rng, 0.0, 1.0);
    Tensor ypos = leaky_relu(pos, 0.3f);
    for (std::size_t i = 0; i < pos.numel(); ++i) CHECK(ypos.values()[i] == pos.values()[i]);

    // gradient at x = -2 is the slope, by central differences
    const double err = grad_check(
        [](const Tensor& t) { return reduce_sum_all(leaky_relu(t, 0.01f)); },
        Tensor::from_data({1}, {-2.0f}), 1e-3);
    CHECK(err < 1e-4);
}

TEST_CASE("bilinear_resize constants and identity") {
    Tensor c = Tensor::full({2, 3, 3}, 0.7f);
    Tensor up = bilinear_resize(c, 7, 5);
    for (float v : up.values()) CHECK(v == doctest::Approx(0.7f).epsilon(1e-6));

    RngStream rng(15);
    Tensor x = random_tensor({1, 4, 6}, rng);
    Tensor same = bilinear_resize(x, 4, 6);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(same.values()[i] == x.values()[i]);
}

TEST_CASE("bilinear_resize 2x2 to 4x4 matches the interpolation formula") {
    // 2x2 grid [[0,1],[2,3]]; align-corners=false samples at
    // src = (i+0.5)/2 - 0.5, i.e. interpolation weights {0, .25, .75, 1}
    Tensor x = Tensor::from_data({1, 2, 2}, {0, 1, 2, 3});
    Tensor y = bilinear_resize(x, 4, 4);
    const double wy[4] = {0.0, 0.25, 0.75, 1.0};
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
            CHECK(y.values()[i * 4 + j] == doctest::Approx(2.0 * wy[i] + wy[j]).epsilon(1e-6));
}

TEST_CASE("matmul identities and oracle") {
    RngStream rng(16);
    Tensor a = random_tensor({3, 4}, rng);
    std::vector<float> eye(16, 0.0f);
    for (int i = 0; i < 4; ++i) eye[static_cast<std::size_t>(i) * 4 + i] = 1.0f;
    Tensor prod = matmul(a, Tensor::from_data({4, 4}, std::move(eye)));
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(prod.values()[i] == a.values()[i]);

    Tensor z = matmul(Tensor::zeros({2, 3}), random_tensor({3, 5}, rng));
    for (float v : z.values()) CHECK(v == 0.0f);

    Tensor b = random_tensor({4, 2}, rng);
    Tensor y = matmul(a, b);
    std::vector<double> want(3 * 2, 0.0);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 2; ++j) {
            double acc = 0.0;
            for (int k = 0; k < 4; ++k)
                acc += double(a.values()[i * 4 + k]) * double(b.values()[k * 2 + j]);
            want[i * 2 + j] = acc;
        }
    CHECK(max_rel_err(y.values(), want) < 1e-5);

    CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2})), shape_error);
}

TEST_CASE("softmax zero row, shift invariance, double oracle") {
    Tensor zeros = Tensor::zeros({1, 5});
    Tensor u = softmax(zeros, 1);
    for (float v : u.values()) CHECK(v == doctest::Approx(0.2).epsilon(1e-6));

    RngStream rng(17);
    Tensor x = random_tensor({3, 7}, rng, -3.0, 3.0);
    Tensor y1 = softmax(x, 1);
    Tensor y2 = softmax(add_scalar(x, 5.0f), 1);
    for (std::size_t i = 0; i < x.numel(); ++i)
        CHECK(std::abs(y1.values()[i] - y2.values()[i]) < 1e-6);

    std::vector<double> want(x.numel());
    for (int r = 0; r < 3; ++r) {
        double sum = 0.0;
        for (int c = 0; c < 7; ++c) sum += std::exp(double(x.values()[r * 7 + c]));
        for (int c = 0; c < 7; ++c) want[r * 7 + c] = std::exp(double(x.values()[r * 7 + c])) / sum;
    }
    CHECK(max_rel_err(y1.values(), want) < 1e-5);

    // rows sum to one and are strictly positive
    for (int r = 0; r < 3; ++r) {
        double sum = 0.0;
        for (int c = 0; c < 7; ++c) {
            CHECK(y1.values()[r * 7 + c] > 0.0f);
            sum += y1.values()[r * 7 + c];
        }
        CHECK(std::abs(sum - 1.0) < 1e-6);
    }
}

TEST_CASE("reduce_mean squeeze, constant, oracle") {
    RngStream rng(18);
    Tensor x1 = random_tensor({1, 6}, rng);
    Tensor m1 = reduce_mean(x1, 0);
    CHECK(m1.shape() == Shape{6});
    for (std::size_t i = 0; i < 6; ++i) CHECK(m1.values()[i] == x1.values()[i]);

    Tensor c = Tensor::full({4, 3}, 2.5f);
    Tensor mc = reduce_mean(c, 1);
    CHECK(mc.shape() == Shape{4});
    for (float v : mc.values()) CHECK(v == doctest::Approx(2.5f));

    Tensor x = random_tensor({4, 3}, rng);
    Tensor m = reduce_mean(x, 0);
    for (int col = 0; col < 3; ++col) {
        double acc = 0.0;
        for (int row = 0; row < 4; ++row) acc += double(x.values()[row * 3 + col]);
        CHECK(m.values()[col] == doctest::Approx(acc / 4.0).epsilon(1e-6));
    }
}

TEST_CASE("elementwise and structural trivia") {
    RngStream rng(19);
    Tensor x = random_tensor({3, 4}, rng);
    Tensor same = add(x, Tensor::zeros({3, 4}));
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(same.values()[i] == x.values()[i]);

    Tensor r = reshape(reshape(x, {2, 6}), {3, 4});
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(r.values()[i] == x.values()[i]);

    Tensor tt = transpose2d(transpose2d(x));
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(tt.values()[i] == x.values()[i]);

    CHECK(sigmoid(Tensor::zeros({1})).item() == doctest::Approx(0.5));

    CHECK_THROWS_AS(add(x, Tensor::zeros({4, 3})), shape_error);
    CHECK_THROWS_AS(reshape(x, {5, 5}), shape_error);
    CHECK_THROWS_AS(log(Tensor::zeros({2})), value_error);
}

TEST_CASE("repeat tiles an axis and routes gradients back") {
    Tensor x = Tensor::from_data({2}, {1.0f, 2.0f}, true);
    Tape tape;
    TapeScope scope(tape);
    Tensor y = repeat(reshape(x, {1, 2}), 0, 3);
    CHECK(y.shape() == Shape{3, 2});
    for (int i = 0; i < 3; ++i) {
        CHECK(y.values()[i * 2] == 1.0f);
        CHECK(y.values()[i * 2 + 1] == 2.0f);
    }
    Tensor loss = reduce_sum_all(y);
    backward(loss, tape);
    CHECK(x.grad()[0] == doctest::Approx(3.0f));
    CHECK(x.grad()[1] == doctest::Approx(3.0f));
}

TEST_CASE("select0 and concat round structure") {
    RngStream rng(20);
    Tensor a = random_tensor({2, 3}, rng);
    Tensor b = random_tensor({2, 3}, rng);
    const Tensor parts[] = {a, b};
    Tensor cat = concat(parts, 0);
    CHECK(cat.shape() == Shape{4, 3});
    Tensor s = stack0(parts);
    CHECK(s.shape() == Shape{2, 2, 3});
    Tensor back = select0(s, 1);
    for (std::size_t i = 0; i < b.numel(); ++i) CHECK(back.values()[i] == b.values()[i]);
}

TEST_CASE("backward basics: sum and unrelated tensors") {
    Tensor x = Tensor::from_data({4}, {1, 2, 3, 4}, true);
    Tensor z = Tensor::from_data({4}, {5, 6, 7, 8}, true);
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor loss = reduce_sum_all(x);
        backward(loss, tape);
    }
    for (float g : x.grad()) CHECK(g == doctest::Approx(1.0f));
    CHECK_FALSE(z.has_grad()); // loss independent of z

    // calling twice accumulates
    Tape tape2;
    {
        TapeScope scope(tape2);
        Tensor loss = reduce_sum_all(x);
        backward(loss, tape2);
        backward(loss, tape2);
    }
    for (float g : x.grad()) CHECK(g == doctest::Approx(3.0f));

    CHECK_THROWS_AS(backward(x, tape), value_error); // non-scalar loss
}

TEST_CASE("grad_check on linear and quadratic anchors") {
    // loss magnitude near zero keeps float32 quantization out of the differences
    Tensor lin = Tensor::from_data({3}, {0.3f, -0.2f, -0.1f});
    CHECK(grad_check([](const Tensor& t) { return reduce_sum_all(scale(t, 2.0f)); }, lin, 1e-3) <
          1e-6);

    Tensor q = Tensor::from_data({2}, {1.0f, 2.0f}, true);
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor loss = reduce_sum_all(mul(q, q));
        backward_fp64(loss, tape);
    }
    CHECK(q.grad()[0] == doctest::Approx(2.0f));
    CHECK(q.grad()[1] == doctest::Approx(4.0f));
    CHECK(grad_check([](const Tensor& t) { return reduce_sum_all(mul(t, t)); }, q, 1e-2) < 1e-3);

    CHECK_THROWS_AS(grad_check([](const Tensor& t) { return reduce_sum_all(t); }, lin, 0.5), value_error);
}

TEST_CASE("backward matches finite differences on a composite graph") {
    RngStream rng(21);
    Tensor x = random_tensor({2, 3}, rng, 0.1, 0.9);
    // smooth composite (kinks would poison the finite differences themselves)
    auto f = [](const Tensor& t) {
        Tensor h = sigmoid(scale(t, 1.3f));
        Tensor m = matmul(h, transpose2d(h));
        Tensor p = power(add_scalar(m, 0.25f), 1.5f);
        Tensor q = log(add_scalar(mul(p, p), 1.0f));
        return reduce_sum_all(q);
    };
    // 64-bit harness
    CHECK(grad_check(f, x, 1e-2) < 1e-4);

    // 32-bit adjoint accumulation stays within the looser bound
    Tensor xa = x.clone(true);
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor loss = f(xa);
        backward(loss, tape);
    }
    std::vector<float> base(x.values().begin(), x.values().end());
    double max_err = 0.0;
    for (std::size_t i = 0; i < base.size(); ++i) {
        std::vector<float> vp = base, vm = base;
        vp[i] = static_cast<float>(double(base[i]) + 1e-2);
        vm[i] = static_cast<float>(double(base[i]) - 1e-2);
        const double numeric = (double(f(Tensor::from_data(x.shape(), vp)).item()) -
                                double(f(Tensor::from_data(x.shape(), vm)).item())) /
                               (double(vp[i]) - double(vm[i]));
        const double a = double(xa.grad()[i]);
        max_err = std::max(max_err,
                           std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8}));
    }
    CHECK(max_err < 1e-2);
}

TEST_CASE("grad_check across every differentiable op at random small shapes") {
    RngStream rng(99);
    const double tol = 1e-2;
    // fixed-seed random shapes, <= 64 elements each
    Tensor img = random_tensor({2, 4, 4}, rng, 0.1, 0.9);
    Tensor wconv = random_tensor({3, 2, 3, 3}, rng, -0.5, 0.5);
    Tensor bconv = random_tensor({3}, rng, -0.2, 0.2);

    CHECK(grad_check([&](const Tensor& t) { return reduce_sum_all(conv2d(t, wconv, bconv)); }, img,
                     1e-3) < tol);
    CHECK(grad_check([&](const Tensor& t) { return reduce_sum_all(conv2d(img, t, bconv)); }, wconv,
                     1e-3) < tol);
    CHECK(grad_check([&](const Tensor& t) { return reduce_sum_all(conv2d(img, wconv, t)); }, bconv,
                     1e-3) < tol);
    CHECK(grad_check([](const Tensor& t) { return reduce_sum_all(bilinear_resize(t, 7, 3)); }, img,
                     1e-3) < tol);
    CHECK(grad_check([](const Tensor& t) { return reduce_sum_all(bilinear_resize(t, 2, 2)); }, img,
                     1e-3) < tol);

    Tensor a = random_tensor({4, 5}, rng);
    Tensor b = random_tensor({5, 3}, rng);
    CHECK(grad_check([&](const Tensor& t) { return reduce_sum_all(mul(matmul(t, b), matmul(t, b))); },
                     a, 1e-3) < tol);
    CHECK(grad_check([&](const Tensor& t) { return reduce_sum_all(mul(matmul(a, t), matmul(a, t))); },
                     b, 1e-3) < tol);

    Tensor sm = random_tensor({3, 6}, rng, -2.0, 2.0);
    CHECK(grad_check([](const Tensor& t) { return reduce_sum_all(mul(softmax(t, 1), softmax(t, 1))); },
                     sm, 1e-3) < tol);
    CHECK(grad_check([](const Tensor& t) { return reduce_sum_all(mul(reduce_mean(t, 0), reduce_mean(t, 0))); },
                     sm, 1e-3) < tol);

    Tensor pos = random_tensor({8}, rng, 0.2, 0.9);
    CHECK(grad_check([](const Tensor& t) { return reduce_sum_all(log(t)); }, pos, 1e-4) < tol);
    CHECK(grad_check([](const Tensor& t) { return reduce_sum_all(power(t, 2.5f)); }, pos, 1e-4) < tol);
    CHECK(grad_check([](const Tensor& t) { return reduce_sum_all(sigmoid(t)); }, sm, 1e-3) < tol);
    CHECK(grad_check([](const Tensor& t) { return reduce_mean_all(leaky_relu(t, 0.05f)); }, sm, 1e-3) <
          tol);

    Tensor c1 = random_tensor({2, 3}, rng);
    CHECK(grad_check(
              [&](const Tensor& t) {
                  const Tensor parts[] = {t, c1};
                  return reduce_sum_all(mul(concat(parts, 1), concat(parts, 1)));
              },
              c1, 1e-3) < tol);
    CHECK(grad_check(
              [](const Tensor& t) {
                  return reduce_sum_all(mul(transpose2d(t), transpose2d(t)));
              },
              c1, 1e-3) < tol);
    CHECK(grad_check([](const Tensor& t) { return reduce_sum_all(select0(repeat(t, 0, 3), 1)); }, c1,
                     1e-3) < tol);
    CHECK(grad_check([](const Tensor& t) { return reduce_sum_all(clamp(t, -0.5f, 0.5f)); }, sm, 1e-3) <
          tol);
}
