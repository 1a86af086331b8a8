// Command-line surface for the reference-image segmentation pipeline:
// synth / embed / select / train / predict / eval / ablate.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "matchseg/data_io.hpp"
#include "matchseg/embedding.hpp"
#include "matchseg/losses.hpp"
#include "matchseg/segnet.hpp"
#include "matchseg/trainer.hpp"

namespace fs = std::filesystem;
using namespace matchseg;

namespace {

// --- config file -----------------------------------------------------------------

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw config_error("config key '" + key + "' expects a boolean, got '" + v + "'");
}

std::vector<int> parse_int_list(const std::string& v) {
    std::vector<int> out;
    std::istringstream is(v);
    std::string part;
    while (std::getline(is, part, ',')) out.push_back(std::stoi(part));
    return out;
}

void apply_config_key(TrainConfig& cfg, const std::string& key, const std::string& value) {
    try {
        if (key == "steps") cfg.steps = std::stoi(value);
        else if (key == "learning_rate") cfg.learning_rate = std::stod(value);
        else if (key == "weight_decay") cfg.weight_decay = std::stod(value);
        else if (key == "adam_beta1") cfg.adam_beta1 = std::stod(value);
        else if (key == "adam_beta2") cfg.adam_beta2 = std::stod(value);
        else if (key == "adam_eps") cfg.adam_eps = std::stod(value);
        else if (key == "support_k") cfg.support_k = std::stoi(value);
        else if (key == "strategy") cfg.selection_strategy = strategy_from_string(value);
        else if (key == "image_size") cfg.image_size = std::stoi(value);
        else if (key == "seed") cfg.seed = std::stoull(value);
        else if (key == "augment") cfg.augment = parse_bool(value, key);
        else if (key == "lambda1") cfg.loss_weights.lambda1 = std::stof(value);
        else if (key == "lambda2") cfg.loss_weights.lambda2 = std::stof(value);
        else if (key == "lambda3") cfg.loss_weights.lambda3 = std::stof(value);
        else if (key == "channels") {
            cfg.network.channels = parse_int_list(value);
            cfg.network.levels = static_cast<int>(cfg.network.channels.size());
        } else if (key == "ratio") cfg.network.ratio = std::stoi(value);
        else if (key == "attention") cfg.network.use_attention = parse_bool(value, key);
        else if (key == "leaky_slope") cfg.network.leaky_slope = std::stof(value);
        else if (key == "in_channels_query") {
            cfg.network.in_channels_query = std::stoi(value);
            cfg.network.in_channels_support = cfg.network.in_channels_query + 1;
        } else throw config_error("unknown config key '" + key + "'");
    } catch (const std::invalid_argument&) {
        throw config_error("config key '" + key + "' has an unparsable value '" + value + "'");
    } catch (const std::out_of_range&) {
        throw config_error("config key '" + key + "' has an out-of-range value '" + value + "'");
    }
}

// Plain key=value lines, '#' comments, unknown keys rejected.
TrainConfig parse_train_config(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw io_error(io_error::kind::missing_file, 0, "cannot open config " + path.string());
    TrainConfig cfg;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos) continue;
        const auto last = line.find_last_not_of(" \t\r");
        line = line.substr(first, last - first + 1);
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw config_error("config line " + std::to_string(line_no) + " is not key=value");
        auto strip = [](std::string s) {
            const auto a = s.find_first_not_of(" \t");
            const auto b = s.find_last_not_of(" \t");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        apply_config_key(cfg, strip(line.substr(0, eq)), strip(line.substr(eq + 1)));
    }
    return cfg;
}

// --- atomic outputs ----------------------------------------------------------------

template <class Writer>
void atomic_write_file(const fs::path& dest, Writer&& writer) {
    fs::path tmp = dest;
    tmp += ".tmp";
    writer(tmp);
    fs::rename(tmp, dest);
}

// --- shared helpers ------------------------------------------------------------------

std::vector<float> query_vector(const EmbeddingIndex& index, const Dataset& ds,
                                const std::string& query_id) {
    if (const EmbeddingRecord* rec = index.find(query_id)) return rec->vector;
    if (index.provider_tag() == "desk" && ds.contains(query_id))
        return desk_embed(ds.at(query_id).image);
    throw value_error("query id '" + query_id + "' is not in the embedding index");
}

TrainConfig eval_config(const NetworkConfig& net, const std::string& strategy, int k,
                        int image_size, std::uint64_t seed) {
    TrainConfig cfg;
    cfg.network = net;
    cfg.selection_strategy = strategy_from_string(strategy);
    cfg.support_k = k;
    cfg.image_size = image_size;
    cfg.seed = seed;
    cfg.augment = false;
    return cfg;
}

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"MatchSeg reference-image segmentation pipeline"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset with a stratified split");
    std::string synth_out;
    int synth_n = 120, synth_domains = 3, synth_size = 32;
    std::uint64_t synth_seed = 0;
    synth->add_option("--out", synth_out, "output dataset directory")->required();
    synth->add_option("--n", synth_n, "number of items");
    synth->add_option("--domains", synth_domains, "number of domains");
    synth->add_option("--size", synth_size, "image side length");
    synth->add_option("--seed", synth_seed, "generator seed");

    // embed
    auto* embed = app.add_subcommand("embed", "Build an embedding index for a dataset");
    std::string embed_data, embed_out, embed_provider = "desk";
    embed->add_option("--data", embed_data, "dataset directory")->required();
    embed->add_option("--out", embed_out, "output MEMB file")->required();
    embed->add_option("--provider", embed_provider, "desk or file:PATH");

    // select
    auto* select = app.add_subcommand("select", "Rank the most similar items for a query");
    std::string sel_emb, sel_data, sel_query;
    int sel_k = 8;
    select->add_option("--emb", sel_emb, "MEMB index file")->required();
    select->add_option("--data", sel_data, "dataset directory")->required();
    select->add_option("--query", sel_query, "query item id")->required();
    select->add_option("--k", sel_k, "number of hits");

    // train
    auto* train_cmd = app.add_subcommand("train", "Train a model; loss log goes to stdout");
    std::string train_data, train_cfg_path, train_out, train_strategy;
    int train_steps = -1;
    std::int64_t train_seed = -1;
    train_cmd->add_option("--data", train_data, "dataset directory")->required();
    train_cmd->add_option("--config", train_cfg_path, "key=value config file")->required();
    train_cmd->add_option("--out", train_out, "output MWTS bundle")->required();
    train_cmd->add_option("--strategy", train_strategy, "clip or random (overrides config)");
    train_cmd->add_option("--steps", train_steps, "step count (overrides config)");
    train_cmd->add_option("--seed", train_seed, "seed (overrides config)");

    // predict
    auto* predict = app.add_subcommand("predict", "Write the binary mask for one query");
    std::string pred_model, pred_data, pred_query, pred_emb, pred_strategy = "clip", pred_out;
    int pred_k = 8, pred_size = 32;
    std::uint64_t pred_seed = 0;
    predict->add_option("--model", pred_model, "MWTS bundle")->required();
    predict->add_option("--data", pred_data, "dataset directory")->required();
    predict->add_option("--query", pred_query, "query item id")->required();
    predict->add_option("--emb", pred_emb, "MEMB index file")->required();
    predict->add_option("--k", pred_k, "support set size");
    predict->add_option("--strategy", pred_strategy, "clip or random");
    predict->add_option("--out", pred_out, "output mask .mseg")->required();
    predict->add_option("--image-size", pred_size, "episode image size");
    predict->add_option("--seed", pred_seed, "seed for random selection");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate on the test split; report to stdout");
    std::string eval_model, eval_data, eval_emb, eval_strategy = "clip";
    int eval_repeats = 1, eval_k = 8, eval_size = 32;
    bool eval_ensemble = false;
    std::uint64_t eval_seed = 0;
    eval_cmd->add_option("--model", eval_model, "MWTS bundle")->required();
    eval_cmd->add_option("--data", eval_data, "dataset directory")->required();
    eval_cmd->add_option("--emb", eval_emb, "MEMB index file")->required();
    eval_cmd->add_option("--strategy", eval_strategy, "clip or random");
    eval_cmd->add_option("--repeats", eval_repeats, "support selections per query");
    eval_cmd->add_flag("--ensemble", eval_ensemble, "average probabilities before thresholding");
    eval_cmd->add_option("--k", eval_k, "support set size");
    eval_cmd->add_option("--image-size", eval_size, "episode image size");
    eval_cmd->add_option("--seed", eval_seed, "seed for random selection");

    // ablate
    auto* ablate = app.add_subcommand("ablate", "Strategy/size comparison table on a frozen model");
    std::string abl_model, abl_data, abl_emb, abl_klist = "2,4,8";
    int abl_repeats = 20, abl_size = 32;
    std::uint64_t abl_seed = 0;
    ablate->add_option("--model", abl_model, "MWTS bundle")->required();
    ablate->add_option("--data", abl_data, "dataset directory")->required();
    ablate->add_option("--emb", abl_emb, "MEMB index file")->required();
    ablate->add_option("--k-list", abl_klist, "comma-separated support sizes");
    ablate->add_option("--repeats", abl_repeats, "random selections per query");
    ablate->add_option("--image-size", abl_size, "episode image size");
    ablate->add_option("--seed", abl_seed, "seed for random selection");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*synth) {
            SynthResult r = synth_generate_mem(synth_n, synth_domains, synth_size, synth_seed);
            split_stratified(r.dataset, 0.8, synth_seed);
            const fs::path dest(synth_out);
            fs::path tmp = dest;
            tmp += ".tmp";
            fs::remove_all(tmp);
            save_dataset(tmp, r.dataset);
            fs::remove_all(dest);
            fs::rename(tmp, dest);
        } else if (*embed) {
            const Dataset ds = load_dataset(embed_data);
            const EmbeddingIndex index = build_index(ds, embed_provider);
            atomic_write_file(embed_out, [&](const fs::path& p) { save_index(p, index); });
        } else if (*select) {
            const EmbeddingIndex index = load_index(sel_emb);
            const Dataset ds = load_dataset(sel_data);
            if (!ds.contains(sel_query)) throw value_error("unknown dataset id '" + sel_query + "'");
            const std::vector<float> qv = query_vector(index, ds, sel_query);
            const auto hits = select_top_k(qv, index, sel_k, {sel_query});
            char buf[32];
            for (std::size_t i = 0; i < hits.size(); ++i) {
                std::snprintf(buf, sizeof(buf), "%.4f", static_cast<double>(hits[i].score));
                std::cout << (i + 1) << '\t' << hits[i].id << '\t' << buf << '\n';
            }
        } else if (*train_cmd) {
            TrainConfig cfg = parse_train_config(train_cfg_path);
            if (!train_strategy.empty()) cfg.selection_strategy = strategy_from_string(train_strategy);
            if (train_steps >= 0) cfg.steps = train_steps;
            if (train_seed >= 0) cfg.seed = static_cast<std::uint64_t>(train_seed);
            const Dataset ds = load_dataset(train_data);
            TrainResult result = train(ds, cfg, nullptr, &std::cout);
            atomic_write_file(train_out,
                              [&](const fs::path& p) { save_params(p, result.params, cfg.network); });
        } else if (*predict) {
            auto [params, net] = load_params(pred_model);
            const Dataset ds = load_dataset(pred_data);
            const EmbeddingIndex index = load_index(pred_emb);
            TrainConfig cfg = eval_config(net, pred_strategy, pred_k, pred_size, pred_seed);
            RngStream rng(RngStream::mix(cfg.seed, 0x9d0ull));
            Episode ep = build_episode(ds, pred_query, &index, cfg, rng);
            Tensor mask = binarize(sigmoid(forward(ep, params, net)), 0.5f);
            atomic_write_file(pred_out, [&](const fs::path& p) { save_tensor(p, mask); });
        } else if (*eval_cmd) {
            auto [params, net] = load_params(eval_model);
            const Dataset ds = load_dataset(eval_data);
            const EmbeddingIndex index = load_index(eval_emb);
            TrainConfig cfg = eval_config(net, eval_strategy, eval_k, eval_size, eval_seed);
            EvalReport report = evaluate(params, ds, cfg, eval_repeats, eval_ensemble, &index);
            write_metrics_report(std::cout, report.rows);
        } else if (*ablate) {
            auto [params, net] = load_params(abl_model);
            const Dataset ds = load_dataset(abl_data);
            const EmbeddingIndex index = load_index(abl_emb);
            char buf[64];
            std::cout << "strategy\tk\tdsc_mean\tdsc_std\n";
            for (int k : parse_int_list(abl_klist)) {
                struct Variant {
                    const char* name;
                    std::string strategy;
                    bool ensemble;
                };
                const Variant variants[] = {{"random", "random", false},
                                            {"random+ensemble", "random", true},
                                            {"clip", "clip", false}};
                for (const Variant& var : variants) {
                    TrainConfig cfg = eval_config(net, var.strategy, k, abl_size, abl_seed);
                    EvalReport report = evaluate(params, ds, cfg, abl_repeats, var.ensemble, &index);
                    std::vector<double> dscs;
                    for (const MetricsRow& row : report.rows) dscs.push_back(row.dsc);
                    std::snprintf(buf, sizeof(buf), "%.4f\t%.4f", mean_of(dscs), std_of(dscs));
                    std::cout << var.name << '\t' << k << '\t' << buf << '\n';
                }
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "matchseg: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
