#include "matchseg/embedding.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace matchseg {

// --- EmbeddingIndex ---------------------------------------------------------------

EmbeddingIndex::EmbeddingIndex(int dimension, std::string provider_tag)
    : dimension_(dimension), provider_tag_(std::move(provider_tag)) {
    if (dimension_ < 1) throw config_error("embedding dimension must be positive");
}

void EmbeddingIndex::add(EmbeddingRecord rec) {
    if (rec.id.empty()) throw value_error("embedding record id must be non-empty");
    if (static_cast<int>(rec.vector.size()) != dimension_)
        throw shape_error("embedding record '" + rec.id + "' has dimension " +
                          std::to_string(rec.vector.size()) + ", index expects " +
                          std::to_string(dimension_));
    if (by_id_.count(rec.id)) throw value_error("duplicate embedding id '" + rec.id + "'");
    double norm2 = 0.0;
    for (float v : rec.vector) norm2 += double(v) * double(v);
    if (std::sqrt(norm2) <= 1e-12)
        throw value_error("embedding record '" + rec.id + "' has (near) zero norm");
    by_id_[rec.id] = records_.size();
    records_.push_back(std::move(rec));
}

const EmbeddingRecord* EmbeddingIndex::find(const std::string& id) const {
    auto it = by_id_.find(id);
    return it == by_id_.end() ? nullptr : &records_[it->second];
}

// --- desk encoder -------------------------------------------------------------------

std::vector<float> desk_embed(const Tensor& image) {
    if (image.rank() != 3) throw shape_error("desk_embed input must be (C,H,W)");
    const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
    for (float v : image.values())
        if (v < -1e-6f || v > 1.0f + 1e-6f)
            throw value_error("desk_embed expects image values in [0,1]");

    // channel-mean intensity image, in double
    std::vector<double> mean(static_cast<std::size_t>(h) * w, 0.0);
    const float* iv = image.values().data();
    for (int ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < mean.size(); ++i)
            mean[i] += iv[static_cast<std::size_t>(ch) * mean.size() + i];
    for (double& m : mean) m /= c;

    std::vector<double> feat(kDeskEmbedDim, 0.0);

    // (a) 8x8 bilinear downsample of the mean image, align-corners=false
    const double sy = double(h) / 8.0, sx = double(w) / 8.0;
    for (int y = 0; y < 8; ++y) {
        const double fy = (y + 0.5) * sy - 0.5;
        int y0 = static_cast<int>(std::floor(fy));
        const double wy = fy - y0;
        int y1 = std::clamp(y0 + 1, 0, h - 1);
        y0 = std::clamp(y0, 0, h - 1);
        for (int x = 0; x < 8; ++x) {
            const double fx = (x + 0.5) * sx - 0.5;
            int x0 = static_cast<int>(std::floor(fx));
            const double wx = fx - x0;
            int x1 = std::clamp(x0 + 1, 0, w - 1);
            x0 = std::clamp(x0, 0, w - 1);
            feat[static_cast<std::size_t>(y) * 8 + x] =
                (1 - wy) * ((1 - wx) * mean[static_cast<std::size_t>(y0) * w + x0] +
                            wx * mean[static_cast<std::size_t>(y0) * w + x1]) +
                wy * ((1 - wx) * mean[static_cast<std::size_t>(y1) * w + x0] +
                      wx * mean[static_cast<std::size_t>(y1) * w + x1]);
        }
    }

    // (b) 16-bin gradient-orientation histogram over interior pixels,
    // central differences, orientation folded into [0, pi), magnitude-weighted
    constexpr double kPi = 3.141592653589793;
    for (int y = 1; y + 1 < h; ++y) {
        for (int x = 1; x + 1 < w; ++x) {
            const double gx = (mean[static_cast<std::size_t>(y) * w + x + 1] -
                               mean[static_cast<std::size_t>(y) * w + x - 1]) *
                              0.5;
            const double gy = (mean[static_cast<std::size_t>(y + 1) * w + x] -
                               mean[static_cast<std::size_t>(y - 1) * w + x]) *
                              0.5;
            const double mag = std::hypot(gx, gy);
            if (mag <= 0.0) continue;
            double theta = std::atan2(gy, gx);
            if (theta < 0.0) theta += kPi;
            if (theta >= kPi) theta -= kPi;
            const int bin = std::min(15, static_cast<int>(theta / kPi * 16.0));
            feat[64 + static_cast<std::size_t>(bin)] += mag;
        }
    }

    double norm2 = 0.0;
    for (double v : feat) norm2 += v * v;
    const double norm = std::sqrt(norm2);
    std::vector<float> out(kDeskEmbedDim, 0.0f);
    if (norm <= 1e-12) {
        out[0] = 1.0f; // documented fallback for the all-zero image
        return out;
    }
    for (int i = 0; i < kDeskEmbedDim; ++i) out[static_cast<std::size_t>(i)] =
        static_cast<float>(feat[static_cast<std::size_t>(i)] / norm);
    return out;
}

// --- similarity ---------------------------------------------------------------------

double cosine_similarity(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size())
        throw shape_error("cosine_similarity dimension mismatch: " + std::to_string(a.size()) +
                          " vs " + std::to_string(b.size()));
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += double(a[i]) * double(b[i]);
        na += double(a[i]) * double(a[i]);
        nb += double(b[i]) * double(b[i]);
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    if (na <= 1e-12 || nb <= 1e-12)
        throw value_error("cosine_similarity on a degenerate (near zero-norm) embedding");
    return dot / (na * nb);
}

std::vector<SimilarityHit> select_top_k(std::span<const float> query, const EmbeddingIndex& index,
                                        int k, const std::unordered_set<std::string>& exclude) {
    if (k < 1) throw value_error("select_top_k requires K >= 1");
    if (static_cast<int>(query.size()) != index.dimension())
        throw shape_error("query dimension " + std::to_string(query.size()) +
                          " does not match index dimension " + std::to_string(index.dimension()));
    struct Scored {
        double score;
        std::size_t pos;
    };
    std::vector<Scored> scored;
    scored.reserve(index.records().size());
    for (std::size_t i = 0; i < index.records().size(); ++i) {
        const EmbeddingRecord& rec = index.records()[i];
        if (exclude.count(rec.id)) continue;
        scored.push_back({cosine_similarity(query, rec.vector), i});
    }
    if (scored.empty()) throw value_error("select_top_k: no eligible records after exclusions");
    std::stable_sort(scored.begin(), scored.end(),
                     [](const Scored& a, const Scored& b) { return a.score > b.score; });
    const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(k), scored.size());
    std::vector<SimilarityHit> hits;
    hits.reserve(take);
    for (std::size_t i = 0; i < take; ++i)
        hits.push_back({index.records()[scored[i].pos].id, static_cast<float>(scored[i].score)});
    return hits;
}

// --- index building -------------------------------------------------------------------

EmbeddingIndex build_index(const Dataset& ds, const std::string& provider) {
    if (ds.size() == 0) throw value_error("build_index requires a non-empty dataset");
    if (provider == "desk") {
        EmbeddingIndex index(kDeskEmbedDim, "desk");
        for (const DatasetItem& item : ds.items())
            index.add({item.id, desk_embed(item.image)});
        return index;
    }
    if (provider.rfind("file:", 0) == 0) {
        const EmbeddingIndex file_index = load_index(provider.substr(5));
        std::string missing;
        for (const DatasetItem& item : ds.items())
            if (!file_index.find(item.id)) missing += missing.empty() ? item.id : ", " + item.id;
        if (!missing.empty())
            throw value_error("embedding file lacks vectors for dataset ids: " + missing);
        EmbeddingIndex index(file_index.dimension(), "file");
        for (const DatasetItem& item : ds.items())
            index.add({item.id, file_index.find(item.id)->vector});
        return index;
    }
    throw config_error("unknown embedding provider '" + provider + "' (expected desk or file:PATH)");
}

// --- MEMB file format --------------------------------------------------------------------

namespace {

constexpr char kIndexMagic[4] = {'M', 'E', 'M', 'B'};
constexpr std::uint8_t kIndexVersion = 1;

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    put_u16(out, static_cast<std::uint16_t>(v & 0xffff));
    put_u16(out, static_cast<std::uint16_t>(v >> 16));
}

} // namespace

void save_index(const std::filesystem::path& path, const EmbeddingIndex& index) {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), kIndexMagic, kIndexMagic + 4);
    out.push_back(kIndexVersion);
    put_u32(out, static_cast<std::uint32_t>(index.records().size()));
    put_u32(out, static_cast<std::uint32_t>(index.dimension()));
    for (const EmbeddingRecord& rec : index.records()) {
        if (rec.id.size() > 0xffff) throw value_error("embedding id too long to serialize");
        put_u16(out, static_cast<std::uint16_t>(rec.id.size()));
        out.insert(out.end(), rec.id.begin(), rec.id.end());
        for (float v : rec.vector) {
            std::uint32_t bits;
            std::memcpy(&bits, &v, 4);
            put_u32(out, bits);
        }
    }
    put_u16(out, static_cast<std::uint16_t>(index.provider_tag().size()));
    out.insert(out.end(), index.provider_tag().begin(), index.provider_tag().end());

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw io_error(io_error::kind::missing_file, 0, "cannot write " + path.string());
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

EmbeddingIndex load_index(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error(io_error::kind::missing_file, 0, "cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());

    std::size_t pos = 0;
    auto need = [&](std::size_t n, const char* what) {
        if (pos + n > bytes.size())
            throw io_error(io_error::kind::truncated, pos,
                           std::string("truncated embedding index reading ") + what +
                               ": expected " + std::to_string(n) + " more bytes, got " +
                               std::to_string(bytes.size() - pos));
    };
    need(4, "magic");
    if (std::memcmp(bytes.data(), kIndexMagic, 4) != 0)
        throw io_error(io_error::kind::bad_magic, 0, "expected magic 'MEMB'");
    pos = 4;
    need(1, "version");
    const std::uint8_t version = bytes[pos++];
    if (version != kIndexVersion)
        throw io_error(io_error::kind::bad_version, 4,
                       "unsupported MEMB version " + std::to_string(version));
    auto u16 = [&](const char* what) {
        need(2, what);
        std::uint16_t v = static_cast<std::uint16_t>(bytes[pos] | (bytes[pos + 1] << 8));
        pos += 2;
        return v;
    };
    auto u32 = [&](const char* what) {
        need(4, what);
        std::uint32_t v = static_cast<std::uint32_t>(bytes[pos]) |
                          (static_cast<std::uint32_t>(bytes[pos + 1]) << 8) |
                          (static_cast<std::uint32_t>(bytes[pos + 2]) << 16) |
                          (static_cast<std::uint32_t>(bytes[pos + 3]) << 24);
        pos += 4;
        return v;
    };
    const std::uint32_t count = u32("record count");
    const std::uint32_t dim = u32("dimension");
    if (dim == 0 || dim > (1u << 20))
        throw io_error(io_error::kind::dim_overflow, pos - 4, "implausible embedding dimension");

    std::vector<EmbeddingRecord> records;
    records.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t id_len = u16("id length");
        need(id_len, "id bytes");
        std::string id(reinterpret_cast<const char*>(bytes.data() + pos), id_len);
        pos += id_len;
        std::vector<float> vec(dim);
        for (std::uint32_t d = 0; d < dim; ++d) {
            const std::uint32_t bits = u32("vector payload");
            std::memcpy(&vec[d], &bits, 4);
        }
        records.push_back({std::move(id), std::move(vec)});
    }
    const std::uint16_t tag_len = u16("provider tag length");
    need(tag_len, "provider tag");
    std::string tag(reinterpret_cast<const char*>(bytes.data() + pos), tag_len);
    pos += tag_len;
    if (pos != bytes.size())
        throw io_error(io_error::kind::malformed, pos, "trailing bytes after embedding index");

    EmbeddingIndex index(static_cast<int>(dim), tag);
    for (EmbeddingRecord& rec : records) index.add(std::move(rec));
    return index;
}

} // namespace matchseg
