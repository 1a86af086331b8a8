#include "matchseg/losses.hpp"

#include <cstdio>
#include <ostream>

namespace matchseg {

namespace {

void check_pair(const Tensor& probs, const Tensor& target, const char* op) {
    if (probs.shape() != target.shape())
        throw shape_error(std::string(op) + " requires equal shapes, got " +
                          shape_str(probs.shape()) + " and " + shape_str(target.shape()));
    for (float v : target.values())
        if (v != 0.0f && v != 1.0f)
            throw value_error(std::string(op) + " requires a binary target");
}

Tensor one_minus(const Tensor& x) { return add_scalar(scale(x, -1.0f), 1.0f); }

} // namespace

Tensor dice_loss(const Tensor& probs, const Tensor& target) {
    check_pair(probs, target, "dice_loss");
    Tensor inter = reduce_sum_all(mul(probs, target));
    Tensor denom = add_scalar(add(reduce_sum_all(probs), reduce_sum_all(target)), kDiceEps);
    Tensor ratio = mul(add_scalar(scale(inter, 2.0f), kDiceEps), power(denom, -1.0f));
    return add_scalar(scale(ratio, -1.0f), 1.0f);
}

Tensor bce_loss(const Tensor& probs, const Tensor& target) {
    check_pair(probs, target, "bce_loss");
    Tensor pc = clamp(probs, kProbClamp, 1.0f - kProbClamp);
    Tensor term = add(mul(target, log(pc)), mul(one_minus(target), log(one_minus(pc))));
    return scale(reduce_mean_all(term), -1.0f);
}

Tensor focal_loss(const Tensor& probs, const Tensor& target, float gamma,
                  std::optional<float> alpha) {
    check_pair(probs, target, "focal_loss");
    if (gamma < 0.0f) throw value_error("focal_loss gamma must be >= 0");
    if (alpha && !(*alpha > 0.0f && *alpha <= 1.0f))
        throw value_error("focal_loss alpha must be in (0,1]");
    Tensor pc = clamp(probs, kProbClamp, 1.0f - kProbClamp);
    Tensor pt = add(mul(target, pc), mul(one_minus(target), one_minus(pc)));
    Tensor weighted = mul(power(one_minus(pt), gamma), log(pt));
    if (alpha) {
        // alpha_t = alpha*y + (1-alpha)*(1-y) = (2*alpha-1)*y + (1-alpha)
        Tensor at = add_scalar(scale(target, 2.0f * *alpha - 1.0f), 1.0f - *alpha);
        weighted = mul(at, weighted);
    }
    return scale(reduce_mean_all(weighted), -1.0f);
}

Tensor total_loss(const Tensor& probs, const Tensor& target, const LossWeights& weights) {
    if (!(weights.lambda1 >= 0.0f && weights.lambda2 >= 0.0f && weights.lambda3 >= 0.0f) ||
        (weights.lambda1 == 0.0f && weights.lambda2 == 0.0f && weights.lambda3 == 0.0f))
        throw config_error("loss weights must be non-negative with at least one positive");
    Tensor out = scale(dice_loss(probs, target), weights.lambda1);
    out = add(out, scale(bce_loss(probs, target), weights.lambda2));
    out = add(out, scale(focal_loss(probs, target), weights.lambda3));
    return out;
}

namespace {

struct Counts {
    std::size_t inter = 0, pred = 0, targ = 0;
};

Counts count_overlap(const Tensor& pred, const Tensor& target, const char* op) {
    check_pair(pred, target, op);
    for (float v : pred.values())
        if (v != 0.0f && v != 1.0f)
            throw value_error(std::string(op) + " requires a binary prediction");
    Counts c;
    const float* p = pred.values().data();
    const float* t = target.values().data();
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        const bool pv = p[i] != 0.0f, tv = t[i] != 0.0f;
        c.inter += pv && tv;
        c.pred += pv;
        c.targ += tv;
    }
    return c;
}

} // namespace

double dsc_metric(const Tensor& pred_binary, const Tensor& target) {
    const Counts c = count_overlap(pred_binary, target, "dsc_metric");
    if (c.pred + c.targ == 0) return 1.0;
    return 2.0 * static_cast<double>(c.inter) / static_cast<double>(c.pred + c.targ);
}

double iou_metric(const Tensor& pred_binary, const Tensor& target) {
    const Counts c = count_overlap(pred_binary, target, "iou_metric");
    const std::size_t uni = c.pred + c.targ - c.inter;
    if (uni == 0) return 1.0;
    return static_cast<double>(c.inter) / static_cast<double>(uni);
}

Tensor binarize(const Tensor& probs, float threshold) {
    Tensor out = Tensor::zeros(probs.shape());
    const float* p = probs.values().data();
    float* o = out.values_mut().data();
    for (std::size_t i = 0; i < probs.numel(); ++i) o[i] = p[i] > threshold ? 1.0f : 0.0f;
    return out;
}

void write_metrics_report(std::ostream& os, const std::vector<MetricsRow>& rows) {
    char buf[64];
    double dsc_sum = 0.0, iou_sum = 0.0;
    for (const MetricsRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%.4f\t%.4f", r.dsc, r.iou);
        os << r.query_id << '\t' << buf << '\n';
        dsc_sum += r.dsc;
        iou_sum += r.iou;
    }
    const double n = rows.empty() ? 1.0 : static_cast<double>(rows.size());
    std::snprintf(buf, sizeof(buf), "%.4f\t%.4f", dsc_sum / n, iou_sum / n);
    os << "MEAN\t" << buf << '\n';
}

} // namespace matchseg
