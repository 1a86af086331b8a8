#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "matchseg/data_io.hpp"
#include "matchseg/tensor.hpp"

namespace matchseg {

inline constexpr int kDeskEmbedDim = 80;

struct EmbeddingRecord {
    std::string id;
    std::vector<float> vector;
};

// Ordered collection of (id, vector) records; insertion order defines
// tie-breaking for equal similarity scores. Immutable once built.
class EmbeddingIndex {
public:
    EmbeddingIndex(int dimension, std::string provider_tag);

    void add(EmbeddingRecord rec); // validates dimension, id uniqueness, non-zero norm

    int dimension() const { return dimension_; }
    const std::string& provider_tag() const { return provider_tag_; }
    const std::vector<EmbeddingRecord>& records() const { return records_; }
    const EmbeddingRecord* find(const std::string& id) const;

private:
    int dimension_;
    std::string provider_tag_;
    std::vector<EmbeddingRecord> records_;
    std::unordered_map<std::string, std::size_t> by_id_;
};

struct SimilarityHit {
    std::string id;
    float score; // cosine similarity in [-1, 1]
};

// Deterministic desk-scale image encoder: an 8x8 bilinear-downsampled
// channel-mean intensity grid (64 values) concatenated with a 16-bin
// magnitude-weighted gradient-orientation histogram (central differences,
// bins uniform over [0, pi)), L2-normalized. An all-zero image maps to the
// unit vector with 1 in the first slot. Encoder version 1 - the formula is
// frozen; changing it breaks recorded indexes.
std::vector<float> desk_embed(const Tensor& image);

// dot(a,b)/(|a||b|) with 64-bit accumulation; norms must exceed 1e-12.
double cosine_similarity(std::span<const float> a, std::span<const float> b);

// Top-K records by cosine similarity to the query, ties broken by earlier
// insertion position, excluded ids never returned. Result length is
// min(K, eligible); an empty eligible pool is an error.
std::vector<SimilarityHit> select_top_k(std::span<const float> query, const EmbeddingIndex& index,
                                        int k, const std::unordered_set<std::string>& exclude);

// provider is "desk" or "file:<path to MEMB file>". One record per dataset
// item, in manifest order.
EmbeddingIndex build_index(const Dataset& ds, const std::string& provider);

// MEMB format (little-endian): magic "MEMB", version byte = 1, record count
// u32, dimension u32, per record u16 id length + UTF-8 id + D floats, then a
// u16-length-prefixed UTF-8 provider tag.
void save_index(const std::filesystem::path& path, const EmbeddingIndex& index);
EmbeddingIndex load_index(const std::filesystem::path& path);

} // namespace matchseg
