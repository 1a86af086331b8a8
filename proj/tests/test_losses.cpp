#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <sstream>

#include "matchseg/losses.hpp"
#include "matchseg/rng.hpp"

using namespace matchseg;

namespace {

Tensor random_probs(Shape shape, RngStream& rng) {
    std::vector<float> data(shape_numel(shape));
    for (float& v : data) v = static_cast<float>(rng.uniform(0.02, 0.98));
    return Tensor::from_data(std::move(shape), std::move(data));
}

Tensor random_mask(Shape shape, RngStream& rng, double p = 0.4) {
    std::vector<float> data(shape_numel(shape));
    for (float& v : data) v = rng.bernoulli(p) ? 1.0f : 0.0f;
    return Tensor::from_data(std::move(shape), std::move(data));
}

// double-precision oracles
double oracle_dice(const Tensor& p, const Tensor& y) {
    double inter = 0, sp = 0, st = 0;
    for (std::size_t i = 0; i < p.numel(); ++i) {
        inter += double(p.values()[i]) * double(y.values()[i]);
        sp += p.values()[i];
        st += y.values()[i];
    }
    return 1.0 - (2.0 * inter + 1e-6) / (sp + st + 1e-6);
}

double oracle_bce(const Tensor& p, const Tensor& y) {
    double acc = 0;
    for (std::size_t i = 0; i < p.numel(); ++i) {
        const double pc = std::min(std::max(double(p.values()[i]), 1e-7), 1.0 - 1e-7);
        const double t = y.values()[i];
        acc += -(t * std::log(pc) + (1.0 - t) * std::log(1.0 - pc));
    }
    return acc / double(p.numel());
}

double oracle_focal(const Tensor& p, const Tensor& y, double gamma, double alpha) {
    double acc = 0;
    for (std::size_t i = 0; i < p.numel(); ++i) {
        const double pc = std::min(std::max(double(p.values()[i]), 1e-7), 1.0 - 1e-7);
        const double t = y.values()[i];
        const double pt = t > 0.5 ? pc : 1.0 - pc;
        const double at = t > 0.5 ? alpha : 1.0 - alpha;
        acc += -at * std::pow(1.0 - pt, gamma) * std::log(pt);
    }
    return acc / double(p.numel());
}

} // namespace

TEST_CASE("dice_loss anchors and oracle") {
    RngStream rng(51);
    Tensor y = random_mask({1, 16, 16}, rng);
    CHECK(dice_loss(y, y).item() <= 1e-6); // binary probs == target

    // disjoint: probs = 1 - target, with enough positive pixels
    std::vector<float> inv(y.values().begin(), y.values().end());
    int positives = 0;
    for (float v : y.values()) positives += v != 0.0f;
    REQUIRE(positives >= 8);
    for (float& v : inv) v = 1.0f - v;
    CHECK(dice_loss(Tensor::from_data(y.shape(), std::move(inv)), y).item() >= 1.0f - 1e-3f);

    for (int i = 0; i < 5; ++i) {
        Tensor p = random_probs({1, 12, 12}, rng);
        Tensor t = random_mask({1, 12, 12}, rng);
        CHECK(double(dice_loss(p, t).item()) ==
              doctest::Approx(oracle_dice(p, t)).epsilon(1e-6));
    }
    CHECK_THROWS_AS(dice_loss(Tensor::zeros({1, 4, 4}), Tensor::zeros({1, 4, 5})), shape_error);
}

TEST_CASE("bce_loss anchors and oracle") {
    RngStream rng(52);
    Tensor y = random_mask({1, 10, 10}, rng);
    Tensor half = Tensor::full({1, 10, 10}, 0.5f);
    CHECK(double(bce_loss(half, y).item()) == doctest::Approx(std::log(2.0)).epsilon(1e-4));

    CHECK(bce_loss(y, y).item() <= 1e-6f + 1e-7f);

    for (int i = 0; i < 5; ++i) {
        Tensor p = random_probs({1, 9, 9}, rng);
        Tensor t = random_mask({1, 9, 9}, rng);
        CHECK(double(bce_loss(p, t).item()) == doctest::Approx(oracle_bce(p, t)).epsilon(1e-6));
    }
}

TEST_CASE("focal_loss anchors, gamma=0 equals BCE, oracle") {
    RngStream rng(53);
    Tensor p = random_probs({1, 8, 8}, rng);
    Tensor t = random_mask({1, 8, 8}, rng);

    // gamma = 0, alpha disabled -> BCE
    CHECK(double(focal_loss(p, t, 0.0f, std::nullopt).item()) ==
          doctest::Approx(double(bce_loss(p, t).item())).epsilon(1e-6));

    CHECK(focal_loss(t, t).item() <= 1e-6f);

    for (int i = 0; i < 5; ++i) {
        Tensor pp = random_probs({1, 8, 8}, rng);
        Tensor tt = random_mask({1, 8, 8}, rng);
        CHECK(double(focal_loss(pp, tt, 2.0f, 0.25f).item()) ==
              doctest::Approx(oracle_focal(pp, tt, 2.0, 0.25)).epsilon(1e-6));
    }
}

TEST_CASE("total_loss is the weighted recomposition") {
    RngStream rng(54);
    Tensor p = random_probs({1, 8, 8}, rng);
    Tensor t = random_mask({1, 8, 8}, rng);
    LossWeights w; // 0.6, 0.3, 0.3
    const double want = 0.6 * double(dice_loss(p, t).item()) +
                        0.3 * double(bce_loss(p, t).item()) +
                        0.3 * double(focal_loss(p, t).item());
    CHECK(double(total_loss(p, t, w).item()) == doctest::Approx(want).epsilon(1e-6));

    // component losses (0.5, 0.2, 0.1) with weights (0.6, 0.3, 0.3) -> 0.39
    CHECK(0.6 * 0.5 + 0.3 * 0.2 + 0.3 * 0.1 == doctest::Approx(0.39).epsilon(1e-9));

    LossWeights dice_only{1.0f, 0.0f, 0.0f};
    CHECK(double(total_loss(p, t, dice_only).item()) ==
          doctest::Approx(double(dice_loss(p, t).item())).epsilon(1e-7));

    CHECK_THROWS_AS(total_loss(p, t, LossWeights{0.0f, 0.0f, 0.0f}), config_error);
}

TEST_CASE("total_loss gradient passes grad_check on random 8x8 inputs") {
    RngStream rng(55);
    Tensor t = random_mask({1, 8, 8}, rng);
    Tensor p = random_probs({1, 8, 8}, rng);
    LossWeights w;
    // eps small enough that the log-pole curvature near saturated
    // probabilities does not bias the central differences
    const double err =
        grad_check([&](const Tensor& x) { return total_loss(x, t, w); }, p, 1e-3);
    CHECK(err < 1e-2);
}

TEST_CASE("losses are non-negative, dice bounded") {
    RngStream rng(56);
    for (int i = 0; i < 10; ++i) {
        Tensor p = random_probs({1, 7, 7}, rng);
        Tensor t = random_mask({1, 7, 7}, rng);
        CHECK(dice_loss(p, t).item() >= 0.0f);
        CHECK(dice_loss(p, t).item() <= 1.0f + 1e-6f);
        CHECK(bce_loss(p, t).item() >= 0.0f);
        CHECK(focal_loss(p, t).item() >= 0.0f);
    }
}

TEST_CASE("focal loss decreases as p_t grows on positive pixels") {
    Tensor t = Tensor::full({1, 1, 1}, 1.0f);
    double prev = 1e30;
    for (float pv : {0.1f, 0.3f, 0.5f, 0.7f, 0.9f}) {
        const double loss = focal_loss(Tensor::full({1, 1, 1}, pv), t).item();
        CHECK(loss < prev);
        prev = loss;
    }
}

TEST_CASE("metrics anchors and the DSC/IoU identity") {
    RngStream rng(57);
    Tensor a = random_mask({1, 10, 10}, rng);
    CHECK(dsc_metric(a, a) == doctest::Approx(1.0));
    CHECK(iou_metric(a, a) == doctest::Approx(1.0));

    // disjoint nonempty masks
    Tensor p = Tensor::zeros({1, 2, 2});
    Tensor q = Tensor::zeros({1, 2, 2});
    p.values_mut()[0] = 1.0f;
    q.values_mut()[3] = 1.0f;
    CHECK(dsc_metric(p, q) == doctest::Approx(0.0));
    CHECK(iou_metric(p, q) == doctest::Approx(0.0));

    // both empty -> 1.0 by convention
    CHECK(dsc_metric(Tensor::zeros({1, 4, 4}), Tensor::zeros({1, 4, 4})) == doctest::Approx(1.0));
    CHECK(iou_metric(Tensor::zeros({1, 4, 4}), Tensor::zeros({1, 4, 4})) == doctest::Approx(1.0));

    // hand-counted: two 2x2 blocks sharing 2 pixels -> DSC 0.5, IoU 1/3
    Tensor blockA = Tensor::zeros({1, 4, 4});
    Tensor blockB = Tensor::zeros({1, 4, 4});
    for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 2; ++x) {
            blockA.values_mut()[y * 4 + x] = 1.0f;        // rows 0-1, cols 0-1
            blockB.values_mut()[(y + 1) * 4 + x] = 1.0f;  // rows 1-2, cols 0-1
        }
    CHECK(dsc_metric(blockA, blockB) == doctest::Approx(0.5));
    CHECK(iou_metric(blockA, blockB) == doctest::Approx(1.0 / 3.0));

    // identity DSC = 2 IoU / (1 + IoU) over random pairs
    for (int i = 0; i < 100; ++i) {
        Tensor x = random_mask({1, 8, 8}, rng, 0.3);
        Tensor y = random_mask({1, 8, 8}, rng, 0.3);
        const double dsc = dsc_metric(x, y), iou = iou_metric(x, y);
        CHECK(dsc == doctest::Approx(2.0 * iou / (1.0 + iou)).epsilon(1e-6));
        CHECK(iou <= dsc + 1e-12);
        CHECK(dsc >= 0.0);
        CHECK(dsc <= 1.0);
    }
}

TEST_CASE("binarize thresholds at 0.5") {
    Tensor p = Tensor::from_data({1, 1, 4}, {0.49f, 0.5f, 0.51f, 1.0f});
    Tensor b = binarize(p, 0.5f);
    CHECK(b.values()[0] == 0.0f);
    CHECK(b.values()[1] == 0.0f);
    CHECK(b.values()[2] == 1.0f);
    CHECK(b.values()[3] == 1.0f);
}

TEST_CASE("metric report format: 4 decimals, MEAN row") {
    std::vector<MetricsRow> rows = {{"q1", 0.5, 0.33333333}, {"q2", 1.0, 1.0}};
    std::ostringstream os;
    write_metrics_report(os, rows);
    CHECK(os.str() == "q1\t0.5000\t0.3333\nq2\t1.0000\t1.0000\nMEAN\t0.7500\t0.6667\n");
}
