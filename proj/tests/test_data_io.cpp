#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "matchseg/data_io.hpp"
#include "matchseg/rng.hpp"

using namespace matchseg;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    const fs::path p = fs::temp_directory_path() / ("matchseg_dio_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::vector<std::uint8_t> file_bytes(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// independent reimplementation of the per-pixel membership tests
bool oracle_contains(const BlobSpec& b, double px, double py) {
    const double u = px - b.cx, v = py - b.cy;
    const double ur = u * std::cos(b.theta) + v * std::sin(b.theta);
    const double vr = -u * std::sin(b.theta) + v * std::cos(b.theta);
    if (b.kind == BlobSpec::Kind::ellipse)
        return (ur * ur) / (b.a * b.a) + (vr * vr) / (b.b * b.b) <= 1.0;
    const double qx = std::abs(ur) - (b.a - b.corner_r);
    const double qy = std::abs(vr) - (b.b - b.corner_r);
    const double ox = std::max(qx, 0.0), oy = std::max(qy, 0.0);
    return std::sqrt(ox * ox + oy * oy) + std::min(std::max(qx, qy), 0.0) <= b.corner_r;
}

} // namespace

TEST_CASE("MSEG round trip is bitwise") {
    RngStream rng(31);
    std::vector<float> data(24);
    for (float& v : data) v = static_cast<float>(rng.uniform(-10.0, 10.0));
    Tensor t = Tensor::from_data({2, 3, 4}, data);
    const fs::path dir = temp_dir("roundtrip");
    save_tensor(dir / "t.mseg", t);
    Tensor back = load_tensor(dir / "t.mseg");
    CHECK(back.shape() == t.shape());
    for (std::size_t i = 0; i < t.numel(); ++i) CHECK(back.values()[i] == t.values()[i]);
}

TEST_CASE("MSEG 2x3x4 file is exactly 114 bytes") {
    // 4 magic + 1 version + 1 rank + 3*4 dims + 24*4 payload
    Tensor t = Tensor::zeros({2, 3, 4});
    CHECK(tensor_to_bytes(t).size() == 114);
    const fs::path dir = temp_dir("size");
    save_tensor(dir / "t.mseg", t);
    CHECK(fs::file_size(dir / "t.mseg") == 114);
}

TEST_CASE("MSEG error kinds carry byte offsets") {
    Tensor t = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    std::vector<std::uint8_t> bytes = tensor_to_bytes(t);

    SUBCASE("truncated payload names expected vs actual") {
        std::vector<std::uint8_t> cut(bytes.begin(), bytes.end() - 5);
        try {
            tensor_from_bytes(cut);
            FAIL("expected truncation error");
        } catch (const io_error& e) {
            CHECK(e.error_kind() == io_error::kind::truncated);
            CHECK(std::string(e.what()).find("expected") != std::string::npos);
        }
    }
    SUBCASE("bad magic") {
        bytes[0] = 'X';
        try {
            tensor_from_bytes(bytes);
            FAIL("expected magic error");
        } catch (const io_error& e) {
            CHECK(e.error_kind() == io_error::kind::bad_magic);
            CHECK(e.byte_offset() == 0);
        }
    }
    SUBCASE("unsupported version") {
        bytes[4] = 9;
        try {
            tensor_from_bytes(bytes);
            FAIL("expected version error");
        } catch (const io_error& e) {
            CHECK(e.error_kind() == io_error::kind::bad_version);
            CHECK(e.byte_offset() == 4);
        }
    }
    SUBCASE("dim overflow") {
        // rank 2, first dim 0xffffffff
        std::vector<std::uint8_t> evil = {'M', 'S', 'E', 'G', 1, 2, 0xff, 0xff, 0xff, 0xff,
                                          2,   0,   0,   0};
        try {
            tensor_from_bytes(evil);
            FAIL("expected overflow error");
        } catch (const io_error& e) {
            CHECK(e.error_kind() == io_error::kind::dim_overflow);
            CHECK(e.byte_offset() == 6);
        }
    }
}

TEST_CASE("dataset save/load preserves manifest order and content") {
    Dataset ds;
    RngStream rng(32);
    for (int i = 0; i < 5; ++i) {
        DatasetItem item;
        item.id = "z_item" + std::to_string(9 - i); // ids deliberately not sorted
        std::vector<float> img(16 * 16);
        for (float& v : img) v = static_cast<float>(rng.uniform());
        std::vector<float> msk(16 * 16);
        for (float& v : msk) v = rng.bernoulli(0.3) ? 1.0f : 0.0f;
        item.image = Tensor::from_data({1, 16, 16}, std::move(img));
        item.mask = Tensor::from_data({1, 16, 16}, std::move(msk));
        item.domain = i % 2 ? "a" : "b";
        item.split = i % 3 ? "train" : "test";
        ds.add(std::move(item));
    }
    const fs::path dir = temp_dir("dataset");
    save_dataset(dir, ds);
    Dataset back = load_dataset(dir);
    REQUIRE(back.size() == ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        CHECK(back.items()[i].id == ds.items()[i].id);
        CHECK(back.items()[i].domain == ds.items()[i].domain);
        CHECK(back.items()[i].split == ds.items()[i].split);
        for (std::size_t j = 0; j < ds.items()[i].image.numel(); ++j)
            CHECK(back.items()[i].image.values()[j] == ds.items()[i].image.values()[j]);
    }

    // second save cycle is byte-identical
    const fs::path dir2 = temp_dir("dataset2");
    save_dataset(dir2, back);
    CHECK(file_bytes(dir / "manifest.tsv") == file_bytes(dir2 / "manifest.tsv"));
}

TEST_CASE("synth round-robins domains and respects area bounds") {
    SynthResult r = synth_generate_mem(6, 3, 32, 7);
    REQUIRE(r.dataset.size() == 6);
    std::map<std::string, int> counts;
    for (const DatasetItem& item : r.dataset.items()) ++counts[item.domain];
    CHECK(counts.size() == 3);
    for (const auto& [d, c] : counts) CHECK(c == 2);
    CHECK(r.dataset.items()[0].domain == "domain0");
    CHECK(r.dataset.items()[1].domain == "domain1");
    CHECK(r.dataset.items()[2].domain == "domain2");
    CHECK(r.dataset.items()[3].domain == "domain0");

    SynthResult big = synth_generate_mem(24, 3, 32, 8);
    for (const DatasetItem& item : big.dataset.items()) {
        int area = 0;
        for (float v : item.mask.values()) {
            CHECK((v == 0.0f || v == 1.0f));
            area += v != 0.0f;
        }
        CHECK(area >= 32 * 32 * 4 / 100);
        CHECK(area <= 32 * 32 * 40 / 100);
        for (float v : item.image.values()) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }
    }
}

TEST_CASE("synth masks match the analytic membership oracle") {
    SynthResult r = synth_generate_mem(8, 2, 24, 99);
    for (std::size_t i = 0; i < r.dataset.size(); ++i) {
        const SynthItemMeta& meta = r.meta[i];
        const Tensor& mask = r.dataset.items()[i].mask;
        for (int y = 0; y < 24; ++y)
            for (int x = 0; x < 24; ++x) {
                const bool want = oracle_contains(meta.foreground, x + 0.5, y + 0.5);
                CHECK(mask.values()[y * 24 + x] == (want ? 1.0f : 0.0f));
                // distractor never overlaps the foreground
                if (want) CHECK_FALSE(oracle_contains(meta.distractor, x + 0.5, y + 0.5));
            }
    }
}

TEST_CASE("synth is deterministic on disk, byte for byte") {
    const fs::path d1 = temp_dir("synth1");
    const fs::path d2 = temp_dir("synth2");
    synth_generate(d1, 6, 2, 24, 1234);
    synth_generate(d2, 6, 2, 24, 1234);
    CHECK(file_bytes(d1 / "manifest.tsv") == file_bytes(d2 / "manifest.tsv"));
    for (int i = 0; i < 6; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "item_%04d.mseg", i);
        CHECK(file_bytes(d1 / "images" / name) == file_bytes(d2 / "images" / name));
        CHECK(file_bytes(d1 / "masks" / name) == file_bytes(d2 / "masks" / name));
    }
    const fs::path d3 = temp_dir("synth3");
    synth_generate(d3, 6, 2, 24, 1235);
    CHECK(file_bytes(d1 / "images" / "item_0000.mseg") != file_bytes(d3 / "images" / "item_0000.mseg"));
}

TEST_CASE("stratified split gives per-domain 80/20 and is deterministic") {
    SynthResult r = synth_generate_mem(30, 3, 24, 5);
    split_stratified(r.dataset, 0.8, 17);
    std::map<std::string, std::pair<int, int>> counts;
    for (const DatasetItem& item : r.dataset.items()) {
        if (item.split == "train") counts[item.domain].first++;
        else counts[item.domain].second++;
    }
    REQUIRE(counts.size() == 3);
    for (const auto& [d, c] : counts) {
        CHECK(c.first == 8);
        CHECK(c.second == 2);
    }

    SynthResult r2 = synth_generate_mem(30, 3, 24, 5);
    split_stratified(r2.dataset, 0.8, 17);
    for (std::size_t i = 0; i < r.dataset.size(); ++i)
        CHECK(r.dataset.items()[i].split == r2.dataset.items()[i].split);

    // a different seed moves at least one assignment
    SynthResult r3 = synth_generate_mem(30, 3, 24, 5);
    split_stratified(r3.dataset, 0.8, 18);
    bool any_diff = false;
    for (std::size_t i = 0; i < r.dataset.size(); ++i)
        any_diff = any_diff || r.dataset.items()[i].split != r3.dataset.items()[i].split;
    CHECK(any_diff);
}

TEST_CASE("stratified split rejects single-item domains") {
    Dataset ds;
    DatasetItem a;
    a.id = "only";
    a.image = Tensor::zeros({1, 16, 16});
    a.mask = Tensor::zeros({1, 16, 16});
    a.domain = "lonely";
    a.split = "train";
    ds.add(std::move(a));
    CHECK_THROWS_AS(split_stratified(ds, 0.8, 1), value_error);
}
