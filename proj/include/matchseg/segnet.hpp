#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "matchseg/attention.hpp"
#include "matchseg/tensor.hpp"

namespace matchseg {

struct NetworkConfig {
    int levels = 3;
    std::vector<int> channels = {16, 32, 64}; // per-level widths
    int ratio = 2;                            // attention channel reduction
    int in_channels_query = 1;
    int in_channels_support = 2; // query channels + 1 mask channel
    float leaky_slope = 0.01f;
    bool use_attention = true; // identity pass-through ablation when false

    void validate() const; // throws config_error
};

// Named weight tensors for the full network. Iteration order (std::map) is
// the serialization order.
struct ModelParams {
    std::map<std::string, Tensor> tensors;

    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    void zero_grads();
};

struct SupportPair {
    Tensor image; // (Cq,H,W) in [0,1]
    Tensor mask;  // (1,H,W) binary
};

// One query plus its selected support set - the unit of training and inference.
struct Episode {
    std::string query_id;
    Tensor query_image;               // (Cq,H,W) in [0,1]
    Tensor query_mask;                // (1,H,W) binary; undefined for inference
    std::vector<SupportPair> supports; // K pairs, all sharing H,W with the query
};

// One basic block: each support item is concatenated with the query along
// channels, convolved 3x3 with shared weights, and passed through leakyReLU;
// the query update is the mean over items.
// support (k,Cs,H,W), query (Cq,H,W) -> (S' (k,Cout,H,W), Q' (Cout,H,W)).
std::pair<Tensor, Tensor> cross_conv_block(const Tensor& support, const Tensor& query,
                                           const Tensor& weight, const Tensor& bias, float slope);

// He-style fan-in uniform conv weights, zero biases, fully seed-determined.
ModelParams init_params(const NetworkConfig& config, std::uint64_t seed);

// Full encoder-decoder pass producing (1,H,W) logits for the query mask.
// H and W must be divisible by 2^(levels-1).
Tensor forward(const Episode& episode, const ModelParams& params, const NetworkConfig& config);

// MWTS weight bundle: magic "MWTS", version byte = 1, tensor count u32, per
// tensor u16 name length + UTF-8 name + inline MSEG payload, then a trailing
// UTF-8 JSON config string running to end of file.
void save_params(const std::filesystem::path& path, const ModelParams& params,
                 const NetworkConfig& config);
std::pair<ModelParams, NetworkConfig> load_params(const std::filesystem::path& path);

} // namespace matchseg
