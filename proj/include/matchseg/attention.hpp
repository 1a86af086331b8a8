#pragma once

#include "matchseg/rng.hpp"
#include "matchseg/tensor.hpp"

namespace matchseg {

// 1x1 convolution weights for the joint attention module: two channel
// reductions C -> C' = C/ratio for the query and key paths, and a C -> C
// residual projection for the value path.
struct JointAttentionParams {
    Tensor wq_w, wq_b;     // (C',C,1,1), (C')
    Tensor wk_w, wk_b;     // (C',C,1,1), (C')
    Tensor wres_w, wres_b; // (C,C,1,1), (C)
    int ratio = 1;
};

struct AttentionOutput {
    Tensor support_out; // (k,C,H,W)
    Tensor query_out;   // (C,H,W)
    Tensor attention;   // (HW,HW), rows sum to 1
};

// Couples query features (C,H,W) with k support feature maps (k,C,H,W):
// both are channel-reduced by 1x1 convs, flattened to (HW, kC') with the
// support index as the outer grouping of the kC' axis, an (HW,HW) attention
// map is formed by row-softmax of their product (no scaling factor), each
// support item's (HW,C) flattening is mixed by the map and added to a 1x1
// residual projection of that item, and the query update is the mean of the
// updated support items. Differentiable end to end.
AttentionOutput joint_attention(const Tensor& support, const Tensor& query,
                                const JointAttentionParams& params);

// He-style fan-in uniform init for the three 1x1 convs, zero biases.
JointAttentionParams init_joint_attention_params(int channels, int ratio, RngStream& rng);

} // namespace matchseg
