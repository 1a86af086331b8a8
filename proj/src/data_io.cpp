#include "matchseg/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "matchseg/rng.hpp"

namespace matchseg {

// --- Dataset -------------------------------------------------------------------

void Dataset::add(DatasetItem item) {
    if (by_id_.count(item.id)) throw value_error("duplicate dataset id '" + item.id + "'");
    by_id_[item.id] = items_.size();
    items_.push_back(std::move(item));
}

const DatasetItem& Dataset::at(const std::string& id) const {
    auto it = by_id_.find(id);
    if (it == by_id_.end()) throw value_error("unknown dataset id '" + id + "'");
    return items_[it->second];
}

std::vector<std::string> Dataset::split_ids(const std::string& split) const {
    std::vector<std::string> out;
    for (const DatasetItem& it : items_)
        if (it.split == split) out.push_back(it.id);
    return out;
}

void Dataset::rebuild_id_map() {
    by_id_.clear();
    for (std::size_t i = 0; i < items_.size(); ++i) by_id_[items_[i].id] = i;
}

// --- MSEG byte format -------------------------------------------------------------

namespace {

constexpr char kTensorMagic[4] = {'M', 'S', 'E', 'G'};
constexpr std::uint8_t kTensorVersion = 1;
constexpr std::size_t kMaxElements = 1u << 30;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
}

void put_f32(std::vector<std::uint8_t>& out, float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32(out, v);
}

struct ByteReader {
    std::span<const std::uint8_t> bytes;
    std::size_t pos = 0;
    std::size_t base = 0;

    std::size_t offset() const { return base + pos; }

    void need(std::size_t n, const char* what) const {
        if (pos + n > bytes.size())
            throw io_error(io_error::kind::truncated, offset(),
                           std::string("truncated payload reading ") + what + ": expected " +
                               std::to_string(n) + " more bytes, got " +
                               std::to_string(bytes.size() - pos));
    }

    std::uint8_t u8(const char* what) {
        need(1, what);
        return bytes[pos++];
    }

    std::uint16_t u16(const char* what) {
        need(2, what);
        std::uint16_t v = static_cast<std::uint16_t>(bytes[pos] | (bytes[pos + 1] << 8));
        pos += 2;
        return v;
    }

    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = static_cast<std::uint32_t>(bytes[pos]) |
                          (static_cast<std::uint32_t>(bytes[pos + 1]) << 8) |
                          (static_cast<std::uint32_t>(bytes[pos + 2]) << 16) |
                          (static_cast<std::uint32_t>(bytes[pos + 3]) << 24);
        pos += 4;
        return v;
    }

    float f32(const char* what) {
        const std::uint32_t v = u32(what);
        float f;
        std::memcpy(&f, &v, 4);
        return f;
    }

    std::string str(std::size_t n, const char* what) {
        need(n, what);
        std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
        pos += n;
        return s;
    }
};

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error(io_error::kind::missing_file, 0, "cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    return bytes;
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw io_error(io_error::kind::missing_file, 0, "cannot write " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw io_error(io_error::kind::missing_file, 0, "short write to " + path.string());
}

} // namespace

std::vector<std::uint8_t> tensor_to_bytes(const Tensor& t) {
    std::vector<std::uint8_t> out;
    out.reserve(6 + 4 * t.shape().size() + 4 * t.numel());
    out.insert(out.end(), kTensorMagic, kTensorMagic + 4);
    out.push_back(kTensorVersion);
    out.push_back(static_cast<std::uint8_t>(t.rank()));
    for (int d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : t.values()) put_f32(out, v);
    return out;
}

Tensor tensor_from_bytes(std::span<const std::uint8_t> bytes, std::size_t base_offset,
                         std::size_t* bytes_consumed) {
    ByteReader r{bytes, 0, base_offset};
    r.need(4, "magic");
    if (std::memcmp(bytes.data(), kTensorMagic, 4) != 0)
        throw io_error(io_error::kind::bad_magic, base_offset, "expected magic 'MSEG'");
    r.pos = 4;
    const std::uint8_t version = r.u8("version");
    if (version != kTensorVersion)
        throw io_error(io_error::kind::bad_version, base_offset + 4,
                       "unsupported MSEG version " + std::to_string(version));
    const std::uint8_t rank = r.u8("rank");
    if (rank == 0) throw io_error(io_error::kind::malformed, base_offset + 5, "rank must be >= 1");
    Shape shape;
    std::uint64_t numel = 1;
    for (int i = 0; i < rank; ++i) {
        const std::size_t at = r.offset();
        const std::uint32_t d = r.u32("dimension");
        if (d == 0) throw io_error(io_error::kind::malformed, at, "zero dimension");
        if (d > static_cast<std::uint32_t>(std::numeric_limits<int>::max()))
            throw io_error(io_error::kind::dim_overflow, at, "dimension exceeds int range");
        numel *= d;
        if (numel > kMaxElements)
            throw io_error(io_error::kind::dim_overflow, at,
                           "element count exceeds limit " + std::to_string(kMaxElements));
        shape.push_back(static_cast<int>(d));
    }
    std::vector<float> data(static_cast<std::size_t>(numel));
    r.need(4 * data.size(), "tensor payload");
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = r.f32("tensor payload");
    if (bytes_consumed) *bytes_consumed = r.pos;
    return Tensor::from_data(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
    write_file_bytes(path, tensor_to_bytes(t));
}

Tensor load_tensor(const std::filesystem::path& path) {
    const std::vector<std::uint8_t> bytes = read_file_bytes(path);
    std::size_t consumed = 0;
    Tensor t = tensor_from_bytes(bytes, 0, &consumed);
    if (consumed != bytes.size())
        throw io_error(io_error::kind::malformed, consumed,
                       "trailing bytes after tensor payload in " + path.string());
    return t;
}

// --- dataset directory -------------------------------------------------------------

void save_dataset(const std::filesystem::path& root, const Dataset& ds) {
    std::filesystem::create_directories(root / "images");
    std::filesystem::create_directories(root / "masks");
    std::ostringstream manifest;
    for (const DatasetItem& it : ds.items()) {
        manifest << it.id << '\t' << it.domain << '\t' << it.split << '\n';
        save_tensor(root / "images" / (it.id + ".mseg"), it.image);
        save_tensor(root / "masks" / (it.id + ".mseg"), it.mask);
    }
    const std::string m = manifest.str();
    write_file_bytes(root / "manifest.tsv",
                     std::span<const std::uint8_t>(
                         reinterpret_cast<const std::uint8_t*>(m.data()), m.size()));
}

Dataset load_dataset(const std::filesystem::path& root) {
    std::ifstream f(root / "manifest.tsv");
    if (!f)
        throw io_error(io_error::kind::missing_file, 0,
                       "cannot open " + (root / "manifest.tsv").string());
    Dataset ds;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream ls(line);
        DatasetItem item;
        if (!std::getline(ls, item.id, '\t') || !std::getline(ls, item.domain, '\t') ||
            !std::getline(ls, item.split))
            throw io_error(io_error::kind::malformed, 0,
                           "manifest line " + std::to_string(line_no) + " is not id\\tdomain\\tsplit");
        if (item.split != "train" && item.split != "test")
            throw io_error(io_error::kind::malformed, 0,
                           "manifest line " + std::to_string(line_no) + ": unknown split '" +
                               item.split + "'");
        item.image = load_tensor(root / "images" / (item.id + ".mseg"));
        item.mask = load_tensor(root / "masks" / (item.id + ".mseg"));
        if (item.image.rank() != 3 || item.mask.rank() != 3 || item.mask.dim(0) != 1 ||
            item.image.dim(1) != item.mask.dim(1) || item.image.dim(2) != item.mask.dim(2))
            throw value_error("item '" + item.id + "' has inconsistent image/mask shapes " +
                              shape_str(item.image.shape()) + " vs " + shape_str(item.mask.shape()));
        for (float v : item.mask.values())
            if (v != 0.0f && v != 1.0f)
                throw value_error("item '" + item.id + "' has a non-binary mask");
        ds.add(std::move(item));
    }
    return ds;
}

// --- synthetic generator -------------------------------------------------------------

bool blob_contains(const BlobSpec& blob, double px, double py) {
    const double u = px - blob.cx;
    const double v = py - blob.cy;
    const double c = std::cos(blob.theta), s = std::sin(blob.theta);
    const double ur = u * c + v * s;
    const double vr = -u * s + v * c;
    if (blob.kind == BlobSpec::Kind::ellipse) {
        const double ea = ur / blob.a, eb = vr / blob.b;
        return ea * ea + eb * eb <= 1.0;
    }
    const double qx = std::abs(ur) - (blob.a - blob.corner_r);
    const double qy = std::abs(vr) - (blob.b - blob.corner_r);
    const double outside = std::hypot(std::max(qx, 0.0), std::max(qy, 0.0));
    return outside + std::min(std::max(qx, qy), 0.0) - blob.corner_r <= 0.0;
}

namespace {

struct DomainStyle {
    float bg_lo, bg_hi;    // background intensity band
    float fg_contrast;     // added on foreground pixels (the labeled blob)
    float noise_sigma;
};

// Fixed, versioned style table. The distractor blob always takes the opposite
// contrast sign, so the mapping from appearance to label is resolvable only
// through the support set's convention. Changing these constants is a
// format-breaking change for recorded datasets.
constexpr DomainStyle kDomainStyles[] = {
    {0.20f, 0.32f, +0.50f, 0.020f},
    {0.46f, 0.58f, -0.40f, 0.030f},
    {0.72f, 0.84f, -0.50f, 0.015f},
    {0.33f, 0.45f, +0.42f, 0.025f},
    {0.59f, 0.71f, -0.45f, 0.020f},
    {0.10f, 0.19f, +0.55f, 0.030f},
};
constexpr int kNumStyles = static_cast<int>(sizeof(kDomainStyles) / sizeof(kDomainStyles[0]));

BlobSpec sample_blob(RngStream& rng, int size, double min_half, double max_half) {
    BlobSpec b;
    b.kind = rng.bernoulli(0.5) ? BlobSpec::Kind::ellipse : BlobSpec::Kind::rounded_rect;
    b.cx = rng.uniform(0.25, 0.75) * size;
    b.cy = rng.uniform(0.25, 0.75) * size;
    b.a = rng.uniform(min_half, max_half) * size;
    b.b = rng.uniform(min_half, max_half) * size;
    b.theta = rng.uniform(0.0, 3.141592653589793);
    b.corner_r = rng.uniform(0.1, 0.5) * std::min(b.a, b.b);
    return b;
}

int rasterized_area(const BlobSpec& b, int size) {
    int count = 0;
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            if (blob_contains(b, x + 0.5, y + 0.5)) ++count;
    return count;
}

std::string item_id(int i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "item_%04d", i);
    return buf;
}

} // namespace

SynthResult synth_generate_mem(int n, int domains, int size, std::uint64_t seed) {
    if (domains < 1 || n < domains) throw config_error("synth requires n >= domains >= 1");
    if (size < 16) throw config_error("synth requires size >= 16");

    SynthResult result;
    const int total = size * size;
    for (int i = 0; i < n; ++i) {
        RngStream rng(RngStream::mix(seed, static_cast<std::uint64_t>(i)));
        const int domain = i % domains;
        const DomainStyle& style = kDomainStyles[domain % kNumStyles];

        // Foreground blob: resample until its area is in [4%, 40%] of pixels.
        // The opposite-contrast distractor must be pixel-disjoint from it; if
        // no placement fits after a bounded number of tries, the foreground is
        // resampled as well.
        BlobSpec fg, dis;
        while (true) {
            do {
                fg = sample_blob(rng, size, 0.13, 0.26);
                const int area = rasterized_area(fg, size);
                if (area >= (total * 4 + 99) / 100 && area <= total * 40 / 100) break;
            } while (true);
            bool placed = false;
            for (int tries = 0; tries < 100 && !placed; ++tries) {
                dis = sample_blob(rng, size, 0.07, 0.13);
                placed = true;
                for (int y = 0; y < size && placed; ++y)
                    for (int x = 0; x < size && placed; ++x)
                        if (blob_contains(dis, x + 0.5, y + 0.5) &&
                            blob_contains(fg, x + 0.5, y + 0.5))
                            placed = false;
            }
            if (placed) break;
        }

        const float bg_base = static_cast<float>(rng.uniform(style.bg_lo, style.bg_hi));
        const double ramp_dir = rng.uniform(0.0, 6.283185307179586);
        const double ramp_gx = 0.06 * std::cos(ramp_dir);
        const double ramp_gy = 0.06 * std::sin(ramp_dir);

        std::vector<float> image(static_cast<std::size_t>(total));
        std::vector<float> mask(static_cast<std::size_t>(total));
        for (int y = 0; y < size; ++y) {
            for (int x = 0; x < size; ++x) {
                const double px = x + 0.5, py = y + 0.5;
                double v = bg_base + ramp_gx * (px / size - 0.5) + ramp_gy * (py / size - 0.5);
                const bool in_fg = blob_contains(fg, px, py);
                if (in_fg) v += style.fg_contrast;
                else if (blob_contains(dis, px, py)) v -= style.fg_contrast;
                v += style.noise_sigma * rng.normal();
                image[static_cast<std::size_t>(y) * size + x] =
                    static_cast<float>(std::clamp(v, 0.0, 1.0));
                mask[static_cast<std::size_t>(y) * size + x] = in_fg ? 1.0f : 0.0f;
            }
        }

        DatasetItem item;
        item.id = item_id(i);
        item.domain = "domain" + std::to_string(domain);
        item.split = "train";
        item.image = Tensor::from_data({1, size, size}, std::move(image));
        item.mask = Tensor::from_data({1, size, size}, std::move(mask));
        result.dataset.add(std::move(item));
        result.meta.push_back({item_id(i), domain, fg, dis});
    }
    return result;
}

std::vector<SynthItemMeta> synth_generate(const std::filesystem::path& out_dir, int n, int domains,
                                          int size, std::uint64_t seed) {
    SynthResult r = synth_generate_mem(n, domains, size, seed);
    save_dataset(out_dir, r.dataset);
    return std::move(r.meta);
}

void split_stratified(Dataset& ds, double train_fraction, std::uint64_t seed) {
    // Domains keyed by first appearance; each gets its own deterministic substream.
    std::vector<std::string> domain_order;
    std::map<std::string, std::vector<std::size_t>> by_domain;
    for (std::size_t i = 0; i < ds.items().size(); ++i) {
        const std::string& d = ds.items()[i].domain;
        if (!by_domain.count(d)) domain_order.push_back(d);
        by_domain[d].push_back(i);
    }
    std::uint64_t ordinal = 0;
    for (const std::string& d : domain_order) {
        std::vector<std::size_t>& idx = by_domain[d];
        if (idx.size() < 2)
            throw value_error("domain '" + d + "' has fewer than 2 items; cannot split");
        RngStream rng(RngStream::mix(seed, 0x5711ull, ordinal++));
        for (std::size_t i = idx.size() - 1; i > 0; --i) {
            const std::size_t j = rng.uniform_int(i + 1);
            std::swap(idx[i], idx[j]);
        }
        const auto n_train =
            static_cast<std::size_t>(std::lround(train_fraction * static_cast<double>(idx.size())));
        for (std::size_t i = 0; i < idx.size(); ++i)
            ds.items_mut()[idx[i]].split = i < n_train ? "train" : "test";
    }
}

} // namespace matchseg
