#include "matchseg/attention.hpp"

#include <cmath>
#include <vector>

namespace matchseg {

namespace {

Tensor he_uniform_conv(int out_c, int in_c, int kh, int kw, RngStream& rng) {
    const int fan_in = in_c * kh * kw;
    const double bound = std::sqrt(6.0 / fan_in);
    std::vector<float> data(static_cast<std::size_t>(out_c) * in_c * kh * kw);
    for (float& v : data) v = static_cast<float>(rng.uniform(-bound, bound));
    return Tensor::from_data({out_c, in_c, kh, kw}, std::move(data), /*requires_grad=*/true);
}

} // namespace

JointAttentionParams init_joint_attention_params(int channels, int ratio, RngStream& rng) {
    if (ratio < 1 || channels % ratio != 0)
        throw config_error("attention ratio " + std::to_string(ratio) +
                           " must divide channel count " + std::to_string(channels));
    const int reduced = channels / ratio;
    JointAttentionParams p;
    p.wq_w = he_uniform_conv(reduced, channels, 1, 1, rng);
    p.wq_b = Tensor::zeros({reduced}, true);
    p.wk_w = he_uniform_conv(reduced, channels, 1, 1, rng);
    p.wk_b = Tensor::zeros({reduced}, true);
    p.wres_w = he_uniform_conv(channels, channels, 1, 1, rng);
    p.wres_b = Tensor::zeros({channels}, true);
    p.ratio = ratio;
    return p;
}

AttentionOutput joint_attention(const Tensor& support, const Tensor& query,
                                const JointAttentionParams& params) {
    if (support.rank() != 4) throw shape_error("joint_attention support must be (k,C,H,W)");
    if (query.rank() != 3) throw shape_error("joint_attention query must be (C,H,W)");
    const int k = support.dim(0), c = support.dim(1), h = support.dim(2), w = support.dim(3);
    if (k < 1) throw value_error("joint_attention requires at least one support item");
    if (query.dim(0) != c || query.dim(1) != h || query.dim(2) != w)
        throw shape_error("joint_attention query shape " + shape_str(query.shape()) +
                          " does not match support " + shape_str(support.shape()));
    if (params.ratio < 1 || c % params.ratio != 0)
        throw config_error("joint_attention: channels " + std::to_string(c) +
                           " not divisible by ratio " + std::to_string(params.ratio));
    const int reduced = c / params.ratio;
    const int hw = h * w;

    // (1) reduce the query, tile it k times (support index outer), flatten to (HW, kC')
    Tensor q_red = conv2d(query, params.wq_w, params.wq_b);           // (C',H,W)
    Tensor q_tiled = repeat(reshape(q_red, {1, reduced, h, w}), 0, k); // (k,C',H,W)
    Tensor q_hat = transpose2d(reshape(q_tiled, {k * reduced, hw}));   // (HW,kC')

    // (2) reduce each support item, stack, flatten to (HW, kC')
    std::vector<Tensor> key_items;
    key_items.reserve(static_cast<std::size_t>(k));
    for (int j = 0; j < k; ++j)
        key_items.push_back(conv2d(select0(support, j), params.wk_w, params.wk_b));
    Tensor k_hat = transpose2d(reshape(stack0(key_items), {k * reduced, hw})); // (HW,kC')

    // (3) attention map, row-softmax, no scaling factor
    Tensor attention = softmax(matmul(q_hat, transpose2d(k_hat)), 1); // (HW,HW)

    // (4)+(5) mix each item's (HW,C) flattening with the map, add the 1x1
    // residual. The per-item products share A, so they run as one matmul over
    // the items' concatenated value columns.
    std::vector<Tensor> value_items;
    value_items.reserve(static_cast<std::size_t>(k));
    for (int j = 0; j < k; ++j)
        value_items.push_back(transpose2d(reshape(select0(support, j), {c, hw}))); // (HW,C)
    Tensor mixed_all = matmul(attention, concat(value_items, 1));                  // (HW,kC)
    Tensor mixed_items = reshape(transpose2d(mixed_all), {k, c, h, w});
    std::vector<Tensor> out_items;
    out_items.reserve(static_cast<std::size_t>(k));
    for (int j = 0; j < k; ++j)
        out_items.push_back(add(conv2d(select0(support, j), params.wres_w, params.wres_b),
                                select0(mixed_items, j)));
    AttentionOutput out;
    out.support_out = stack0(out_items);               // (k,C,H,W)
    out.query_out = reduce_mean(out.support_out, 0);   // (C,H,W)
    out.attention = attention;
    return out;
}

} // namespace matchseg
