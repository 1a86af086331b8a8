#include "matchseg/segnet.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "matchseg/data_io.hpp"
#include "matchseg/rng.hpp"

namespace matchseg {

void NetworkConfig::validate() const {
    if (levels < 2) throw config_error("network needs at least 2 levels");
    if (static_cast<int>(channels.size()) != levels)
        throw config_error("channels list length " + std::to_string(channels.size()) +
                           " must equal levels " + std::to_string(levels));
    for (int c : channels) {
        if (c < 1) throw config_error("channel widths must be positive");
        if (ratio < 1 || c % ratio != 0)
            throw config_error("channel width " + std::to_string(c) +
                               " must be divisible by attention ratio " + std::to_string(ratio));
    }
    if (in_channels_query < 1) throw config_error("in_channels_query must be positive");
    if (in_channels_support != in_channels_query + 1)
        throw config_error("in_channels_support must be in_channels_query + 1 (mask channel)");
    if (!(leaky_slope > 0.0f && leaky_slope < 1.0f))
        throw config_error("leaky_slope must be in (0,1)");
}

Tensor& ModelParams::at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw value_error("unknown parameter '" + name + "'");
    return it->second;
}

const Tensor& ModelParams::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw value_error("unknown parameter '" + name + "'");
    return it->second;
}

void ModelParams::zero_grads() {
    for (auto& [name, t] : tensors) t.zero_grad();
}

// --- blocks -----------------------------------------------------------------------

std::pair<Tensor, Tensor> cross_conv_block(const Tensor& support, const Tensor& query,
                                           const Tensor& weight, const Tensor& bias, float slope) {
    if (support.rank() != 4) throw shape_error("cross_conv_block support must be (k,Cs,H,W)");
    if (query.rank() != 3) throw shape_error("cross_conv_block query must be (Cq,H,W)");
    const int k = support.dim(0);
    std::vector<Tensor> items;
    items.reserve(static_cast<std::size_t>(k));
    for (int j = 0; j < k; ++j) {
        const Tensor pair[] = {query, select0(support, j)};
        items.push_back(leaky_relu(conv2d(concat(pair, 0), weight, bias), slope));
    }
    Tensor s_out = stack0(items);
    return {s_out, reduce_mean(s_out, 0)};
}

// --- parameter construction -----------------------------------------------------------

namespace {

Tensor he_conv(int out_c, int in_c, int kh, int kw, RngStream& rng) {
    const int fan_in = in_c * kh * kw;
    const double bound = std::sqrt(6.0 / fan_in);
    std::vector<float> data(static_cast<std::size_t>(out_c) * in_c * kh * kw);
    for (float& v : data) v = static_cast<float>(rng.uniform(-bound, bound));
    return Tensor::from_data({out_c, in_c, kh, kw}, std::move(data), /*requires_grad=*/true);
}

void add_conv(ModelParams& p, const std::string& prefix, int out_c, int in_c, int kh, int kw,
              RngStream& rng) {
    p.tensors[prefix + ".w"] = he_conv(out_c, in_c, kh, kw, rng);
    p.tensors[prefix + ".b"] = Tensor::zeros({out_c}, true);
}

void add_attention(ModelParams& p, const std::string& prefix, int channels, int ratio,
                   RngStream& rng) {
    JointAttentionParams ap = init_joint_attention_params(channels, ratio, rng);
    p.tensors[prefix + ".wq.w"] = ap.wq_w;
    p.tensors[prefix + ".wq.b"] = ap.wq_b;
    p.tensors[prefix + ".wk.w"] = ap.wk_w;
    p.tensors[prefix + ".wk.b"] = ap.wk_b;
    p.tensors[prefix + ".wres.w"] = ap.wres_w;
    p.tensors[prefix + ".wres.b"] = ap.wres_b;
}

JointAttentionParams attention_at(const ModelParams& p, const std::string& prefix, int ratio) {
    JointAttentionParams ap;
    ap.wq_w = p.at(prefix + ".wq.w");
    ap.wq_b = p.at(prefix + ".wq.b");
    ap.wk_w = p.at(prefix + ".wk.w");
    ap.wk_b = p.at(prefix + ".wk.b");
    ap.wres_w = p.at(prefix + ".wres.w");
    ap.wres_b = p.at(prefix + ".wres.b");
    ap.ratio = ratio;
    return ap;
}

// encoder conv input width at a level: stems (level 0) or the previous level's
// output, for both the query and the per-item support path
int enc_in_channels(const NetworkConfig& cfg, int level) {
    return level == 0 ? 2 * cfg.channels[0] : 2 * cfg.channels[static_cast<std::size_t>(level - 1)];
}

int dec_in_channels(const NetworkConfig& cfg, int level) {
    // upsampled (channels[level+1]) concatenated with the skip (channels[level]),
    // then query+support doubling inside the block
    return 2 * (cfg.channels[static_cast<std::size_t>(level + 1)] +
                cfg.channels[static_cast<std::size_t>(level)]);
}

} // namespace

ModelParams init_params(const NetworkConfig& config, std::uint64_t seed) {
    config.validate();
    RngStream rng(RngStream::mix(seed, 0x1217ull));
    ModelParams p;
    // Creation order fixes the rng draw sequence; do not reorder.
    add_conv(p, "stem_q", config.channels[0], config.in_channels_query, 3, 3, rng);
    add_conv(p, "stem_s", config.channels[0], config.in_channels_support, 3, 3, rng);
    for (int lvl = 0; lvl < config.levels; ++lvl) {
        const std::string prefix = "enc" + std::to_string(lvl);
        add_conv(p, prefix + ".conv", config.channels[static_cast<std::size_t>(lvl)],
                 enc_in_channels(config, lvl), 3, 3, rng);
        if (config.use_attention)
            add_attention(p, prefix + ".attn", config.channels[static_cast<std::size_t>(lvl)],
                          config.ratio, rng);
    }
    for (int lvl = config.levels - 2; lvl >= 0; --lvl) {
        const std::string prefix = "dec" + std::to_string(lvl);
        add_conv(p, prefix + ".conv", config.channels[static_cast<std::size_t>(lvl)],
                 dec_in_channels(config, lvl), 3, 3, rng);
        if (config.use_attention)
            add_attention(p, prefix + ".attn", config.channels[static_cast<std::size_t>(lvl)],
                          config.ratio, rng);
    }
    add_conv(p, "head", 1, config.channels[0], 1, 1, rng);
    return p;
}

// --- forward ---------------------------------------------------------------------------

namespace {

Tensor resize_items(const Tensor& support, int h, int w) {
    const int k = support.dim(0);
    std::vector<Tensor> items;
    items.reserve(static_cast<std::size_t>(k));
    for (int j = 0; j < k; ++j) items.push_back(bilinear_resize(select0(support, j), h, w));
    return stack0(items);
}

Tensor concat_items(const Tensor& a, const Tensor& b) {
    const int k = a.dim(0);
    std::vector<Tensor> items;
    items.reserve(static_cast<std::size_t>(k));
    for (int j = 0; j < k; ++j) {
        const Tensor pair[] = {select0(a, j), select0(b, j)};
        items.push_back(concat(pair, 0));
    }
    return stack0(items);
}

void expect_shape(const Tensor& t, const Shape& want, const char* where) {
    if (t.shape() != want)
        throw shape_error(std::string(where) + ": expected " + shape_str(want) + ", got " +
                          shape_str(t.shape()));
}

} // namespace

Tensor forward(const Episode& episode, const ModelParams& params, const NetworkConfig& config) {
    config.validate();
    if (!episode.query_image.defined() || episode.query_image.rank() != 3)
        throw shape_error("episode query image must be (Cq,H,W)");
    if (episode.supports.empty()) throw value_error("episode needs at least one support pair");
    const int h = episode.query_image.dim(1), w = episode.query_image.dim(2);
    const int div = 1 << (config.levels - 1);
    if (h % div != 0 || w % div != 0)
        throw config_error("episode size " + std::to_string(h) + "x" + std::to_string(w) +
                           " must be divisible by 2^(levels-1) = " + std::to_string(div));
    if (episode.query_image.dim(0) != config.in_channels_query)
        throw shape_error("query image channels do not match in_channels_query");

    const int k = static_cast<int>(episode.supports.size());
    Tensor q = conv2d(episode.query_image, params.at("stem_q.w"), params.at("stem_q.b"));
    std::vector<Tensor> stems;
    stems.reserve(static_cast<std::size_t>(k));
    for (const SupportPair& sp : episode.supports) {
        if (sp.image.shape() != episode.query_image.shape())
            throw shape_error("support image shape differs from the query image");
        if (sp.mask.rank() != 3 || sp.mask.dim(0) != 1 || sp.mask.dim(1) != h || sp.mask.dim(2) != w)
            throw shape_error("support mask must be (1,H,W) matching the query");
        const Tensor pair[] = {sp.image, sp.mask};
        stems.push_back(conv2d(concat(pair, 0), params.at("stem_s.w"), params.at("stem_s.b")));
    }
    Tensor s = stack0(stems);

    struct Skip {
        Tensor s, q;
    };
    std::vector<Skip> skips(static_cast<std::size_t>(config.levels - 1));
    int cur_h = h, cur_w = w;

    for (int lvl = 0; lvl < config.levels; ++lvl) {
        const std::string prefix = "enc" + std::to_string(lvl);
        auto [s2, q2] = cross_conv_block(s, q, params.at(prefix + ".conv.w"),
                                         params.at(prefix + ".conv.b"), config.leaky_slope);
        if (config.use_attention) {
            AttentionOutput ao =
                joint_attention(s2, q2, attention_at(params, prefix + ".attn", config.ratio));
            s2 = ao.support_out;
            q2 = ao.query_out;
        }
        const int cl = config.channels[static_cast<std::size_t>(lvl)];
        expect_shape(q2, {cl, cur_h, cur_w}, "encoder query");
        expect_shape(s2, {k, cl, cur_h, cur_w}, "encoder support");
        if (lvl < config.levels - 1) {
            skips[static_cast<std::size_t>(lvl)] = {s2, q2};
            cur_h /= 2;
            cur_w /= 2;
            s = resize_items(s2, cur_h, cur_w);
            q = bilinear_resize(q2, cur_h, cur_w);
        } else {
            s = s2;
            q = q2;
        }
    }

    for (int lvl = config.levels - 2; lvl >= 0; --lvl) {
        const std::string prefix = "dec" + std::to_string(lvl);
        cur_h *= 2;
        cur_w *= 2;
        const Skip& skip = skips[static_cast<std::size_t>(lvl)];
        Tensor q_up = bilinear_resize(q, cur_h, cur_w);
        Tensor s_up = resize_items(s, cur_h, cur_w);
        const Tensor q_pair[] = {q_up, skip.q};
        Tensor q_cat = concat(q_pair, 0);
        Tensor s_cat = concat_items(s_up, skip.s);
        auto [s2, q2] = cross_conv_block(s_cat, q_cat, params.at(prefix + ".conv.w"),
                                         params.at(prefix + ".conv.b"), config.leaky_slope);
        if (config.use_attention) {
            AttentionOutput ao =
                joint_attention(s2, q2, attention_at(params, prefix + ".attn", config.ratio));
            s2 = ao.support_out;
            q2 = ao.query_out;
        }
        const int cl = config.channels[static_cast<std::size_t>(lvl)];
        expect_shape(q2, {cl, cur_h, cur_w}, "decoder query");
        s = s2;
        q = q2;
    }

    Tensor logits = conv2d(q, params.at("head.w"), params.at("head.b"));
    expect_shape(logits, {1, h, w}, "logits");
    return logits;
}

// --- MWTS bundle -------------------------------------------------------------------------

namespace {

nlohmann::json config_to_json(const NetworkConfig& c) {
    return nlohmann::json{{"levels", c.levels},
                          {"channels", c.channels},
                          {"ratio", c.ratio},
                          {"in_channels_query", c.in_channels_query},
                          {"in_channels_support", c.in_channels_support},
                          {"leaky_slope", c.leaky_slope},
                          {"use_attention", c.use_attention}};
}

NetworkConfig config_from_json(const nlohmann::json& j) {
    NetworkConfig c;
    c.levels = j.at("levels").get<int>();
    c.channels = j.at("channels").get<std::vector<int>>();
    c.ratio = j.at("ratio").get<int>();
    c.in_channels_query = j.at("in_channels_query").get<int>();
    c.in_channels_support = j.at("in_channels_support").get<int>();
    c.leaky_slope = j.at("leaky_slope").get<float>();
    c.use_attention = j.at("use_attention").get<bool>();
    c.validate();
    return c;
}

constexpr char kBundleMagic[4] = {'M', 'W', 'T', 'S'};
constexpr std::uint8_t kBundleVersion = 1;

} // namespace

void save_params(const std::filesystem::path& path, const ModelParams& params,
                 const NetworkConfig& config) {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), kBundleMagic, kBundleMagic + 4);
    out.push_back(kBundleVersion);
    const auto count = static_cast<std::uint32_t>(params.tensors.size());
    out.push_back(static_cast<std::uint8_t>(count & 0xff));
    out.push_back(static_cast<std::uint8_t>((count >> 8) & 0xff));
    out.push_back(static_cast<std::uint8_t>((count >> 16) & 0xff));
    out.push_back(static_cast<std::uint8_t>((count >> 24) & 0xff));
    for (const auto& [name, tensor] : params.tensors) {
        if (name.size() > 0xffff) throw value_error("parameter name too long to serialize");
        out.push_back(static_cast<std::uint8_t>(name.size() & 0xff));
        out.push_back(static_cast<std::uint8_t>((name.size() >> 8) & 0xff));
        out.insert(out.end(), name.begin(), name.end());
        const std::vector<std::uint8_t> payload = tensor_to_bytes(tensor);
        out.insert(out.end(), payload.begin(), payload.end());
    }
    const std::string cfg = config_to_json(config).dump();
    out.insert(out.end(), cfg.begin(), cfg.end());

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw io_error(io_error::kind::missing_file, 0, "cannot write " + path.string());
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

std::pair<ModelParams, NetworkConfig> load_params(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error(io_error::kind::missing_file, 0, "cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    std::size_t pos = 0;
    auto need = [&](std::size_t n, const char* what) {
        if (pos + n > bytes.size())
            throw io_error(io_error::kind::truncated, pos,
                           std::string("truncated weight bundle reading ") + what);
    };
    need(4, "magic");
    if (std::memcmp(bytes.data(), kBundleMagic, 4) != 0)
        throw io_error(io_error::kind::bad_magic, 0, "expected magic 'MWTS'");
    pos = 4;
    need(1, "version");
    const std::uint8_t version = bytes[pos++];
    if (version != kBundleVersion)
        throw io_error(io_error::kind::bad_version, 4,
                       "unsupported MWTS version " + std::to_string(version));
    need(4, "tensor count");
    const std::uint32_t count = static_cast<std::uint32_t>(bytes[pos]) |
                                (static_cast<std::uint32_t>(bytes[pos + 1]) << 8) |
                                (static_cast<std::uint32_t>(bytes[pos + 2]) << 16) |
                                (static_cast<std::uint32_t>(bytes[pos + 3]) << 24);
    pos += 4;
    ModelParams params;
    for (std::uint32_t i = 0; i < count; ++i) {
        need(2, "name length");
        const std::uint16_t name_len =
            static_cast<std::uint16_t>(bytes[pos] | (bytes[pos + 1] << 8));
        pos += 2;
        need(name_len, "name bytes");
        std::string name(reinterpret_cast<const char*>(bytes.data() + pos), name_len);
        pos += name_len;
        std::size_t consumed = 0;
        Tensor t = tensor_from_bytes(std::span(bytes).subspan(pos), pos, &consumed);
        pos += consumed;
        t.set_requires_grad(true);
        if (params.tensors.count(name))
            throw io_error(io_error::kind::malformed, pos, "duplicate tensor name '" + name + "'");
        params.tensors[name] = std::move(t);
    }
    const std::string cfg(reinterpret_cast<const char*>(bytes.data() + pos), bytes.size() - pos);
    nlohmann::json j = nlohmann::json::parse(cfg, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded())
        throw io_error(io_error::kind::malformed, pos, "invalid trailing config JSON");
    return {std::move(params), config_from_json(j)};
}

} // namespace matchseg
