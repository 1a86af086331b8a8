#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "matchseg/tensor.hpp"

namespace matchseg {

// One image/mask pair. Images are (Cq,H,W) floats in [0,1]; masks are (1,H,W)
// with values in {0,1}.
struct DatasetItem {
    std::string id;
    Tensor image;
    Tensor mask;
    std::string domain;
    std::string split; // "train" or "test"
};

// Items in manifest order; the order is canonical and preserved by save/load.
class Dataset {
public:
    void add(DatasetItem item);
    const std::vector<DatasetItem>& items() const { return items_; }
    std::vector<DatasetItem>& items_mut() { return items_; }
    const DatasetItem& at(const std::string& id) const;
    bool contains(const std::string& id) const { return by_id_.count(id) != 0; }
    std::vector<std::string> split_ids(const std::string& split) const;
    std::size_t size() const { return items_.size(); }
    void rebuild_id_map();

private:
    std::vector<DatasetItem> items_;
    std::unordered_map<std::string, std::size_t> by_id_;
};

// --- MSEG tensor format -------------------------------------------------------
// Little-endian: magic "MSEG", version byte = 1, rank byte, rank x u32 dims,
// then product(dims) IEEE-754 32-bit floats row-major.

std::vector<std::uint8_t> tensor_to_bytes(const Tensor& t);
// base_offset shifts reported byte offsets when the payload is embedded in a
// larger file. bytes_consumed, when given, receives the parsed length.
Tensor tensor_from_bytes(std::span<const std::uint8_t> bytes, std::size_t base_offset = 0,
                         std::size_t* bytes_consumed = nullptr);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

// --- dataset directory layout ---------------------------------------------------
// root/manifest.tsv holds one "id\tdomain\tsplit" row per item (no header);
// tensors live in root/images/<id>.mseg and root/masks/<id>.mseg.

void save_dataset(const std::filesystem::path& root, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& root);

// --- synthetic generator --------------------------------------------------------

struct BlobSpec {
    enum class Kind { ellipse, rounded_rect };
    Kind kind;
    double cx, cy;     // center, pixel coordinates
    double a, b;       // half extents along the blob's own axes
    double theta;      // rotation, radians
    double corner_r;   // rounded_rect only
};

// Membership test at a pixel center; the mask rasterizer uses exactly this.
bool blob_contains(const BlobSpec& blob, double px, double py);

struct SynthItemMeta {
    std::string id;
    int domain;
    BlobSpec foreground;
    BlobSpec distractor;
};

// Generates n grayscale items of size x size. Each image carries one labeled
// foreground blob and one opposite-contrast distractor blob; the domain fixes
// the background intensity band, the noise level, and which contrast sign is
// foreground. Domains are assigned round-robin. Fully determined by seed.
struct SynthResult {
    Dataset dataset; // split field set to "train" for every item
    std::vector<SynthItemMeta> meta;
};
SynthResult synth_generate_mem(int n, int domains, int size, std::uint64_t seed);

// Same, written to a dataset directory. Returns the per-item metadata.
std::vector<SynthItemMeta> synth_generate(const std::filesystem::path& out_dir, int n, int domains,
                                          int size, std::uint64_t seed);

// Per-domain shuffled split assigning round(train_fraction * n_d) items of
// each domain to "train" and the rest to "test". Deterministic by seed.
void split_stratified(Dataset& ds, double train_fraction, std::uint64_t seed);

} // namespace matchseg
