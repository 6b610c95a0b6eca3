#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "nanmerge/recipe.hpp"
#include "nanmerge/rng.hpp"
#include "nanmerge/safetensors.hpp"

using namespace nanmerge;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("nanmerge_test_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    static int counter() {
        static int c = 0;
        return c++;
    }
    fs::path file(const std::string& name) const { return path / name; }
};

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), long(bytes.size()));
}

bool checkpoints_equal(const Checkpoint& a, const Checkpoint& b) {
    if (a.metadata != b.metadata) return false;
    if (a.opaque != b.opaque) return false;
    if (a.entries.size() != b.entries.size()) return false;
    for (const auto& [name, ta] : a.entries) {
        auto it = b.entries.find(name);
        if (it == b.entries.end()) return false;
        const Tensor& tb = it->second;
        if (ta.shape() != tb.shape() || ta.dtype() != tb.dtype()) return false;
        for (std::size_t i = 0; i < ta.size(); ++i)
            if (ta[i] != tb[i]) return false;
    }
    return true;
}

Checkpoint sample_checkpoint(uint64_t seed) {
    GaussianRng rng(seed);
    Checkpoint c;
    auto add = [&](const std::string& name, std::vector<std::size_t> shape, DType dt) {
        Tensor t(shape, dt);
        for (double& v : t.values()) v = rng.normal();
        // keep only values the storage dtype can hold exactly
        c.entries.emplace(name, cast(t, dt));
    };
    add("a.weight", {3, 4}, DType::F32);
    add("b.weight", {5}, DType::F16);
    add("c.weight", {2, 2}, DType::BF16);
    add("d.weight", {6}, DType::F64);
    add("empty", {0, 7}, DType::F32);
    c.metadata["format"] = "pt";
    c.metadata["note"] = "generated";
    return c;
}

}  // namespace

TEST_CASE("safetensors round trip across dtypes") {
    TempDir dir;
    for (uint64_t seed = 1; seed <= 20; ++seed) {
        Checkpoint c = sample_checkpoint(seed);
        fs::path p = dir.file("rt_" + std::to_string(seed) + ".safetensors");
        write_checkpoint(c, p);
        Checkpoint back = read_checkpoint(p);
        CHECK(checkpoints_equal(c, back));
    }
}

TEST_CASE("canonical writer is byte-deterministic") {
    TempDir dir;
    Checkpoint c = sample_checkpoint(42);
    write_checkpoint(c, dir.file("a.safetensors"));
    write_checkpoint(c, dir.file("b.safetensors"));
    CHECK(read_bytes(dir.file("a.safetensors")) == read_bytes(dir.file("b.safetensors")));
}

TEST_CASE("minimal file built by hand") {
    // one F32 tensor "w", shape [2], values [1.0, 2.0]
    TempDir dir;
    std::string header = R"({"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}})";
    std::vector<std::uint8_t> bytes;
    std::uint64_t len = header.size();
    for (int i = 0; i < 8; ++i) bytes.push_back(std::uint8_t((len >> (8 * i)) & 0xFF));
    bytes.insert(bytes.end(), header.begin(), header.end());
    for (float f : {1.0f, 2.0f}) {
        std::uint8_t raw[4];
        std::memcpy(raw, &f, 4);
        bytes.insert(bytes.end(), raw, raw + 4);
    }
    fs::path p = dir.file("minimal.safetensors");
    write_bytes(p, bytes);

    Checkpoint c = read_checkpoint(p);
    REQUIRE(c.entries.count("w") == 1);
    const Tensor& w = c.entries.at("w");
    CHECK(w.shape() == std::vector<std::size_t>{2});
    CHECK(w.dtype() == DType::F32);
    CHECK(w[0] == 1.0);
    CHECK(w[1] == 2.0);
}

TEST_CASE("half precision write-back is bit exact") {
    TempDir dir;
    Checkpoint c;
    c.entries.emplace("h", Tensor({1}, DType::F16, {1.0}));
    fs::path p = dir.file("half.safetensors");
    write_checkpoint(c, p, DTypePolicy::preserve);
    auto bytes = read_bytes(p);
    // last two bytes are the payload: IEEE half 1.0 = 0x3C00 little-endian
    REQUIRE(bytes.size() >= 2);
    CHECK(bytes[bytes.size() - 2] == 0x00);
    CHECK(bytes[bytes.size() - 1] == 0x3C);
}

TEST_CASE("force_f32 policy rewrites the dtype") {
    TempDir dir;
    Checkpoint c;
    c.entries.emplace("h", Tensor({2}, DType::F16, {1.0, -0.5}));
    write_checkpoint(c, dir.file("f.safetensors"), DTypePolicy::force_f32);
    Checkpoint back = read_checkpoint(dir.file("f.safetensors"));
    CHECK(back.entries.at("h").dtype() == DType::F32);
    CHECK(back.entries.at("h")[0] == 1.0);
}

TEST_CASE("corrupt headers carry the failing position") {
    TempDir dir;

    SUBCASE("truncated file") {
        write_bytes(dir.file("t.safetensors"), {1, 2, 3});
        CHECK_THROWS_AS(read_checkpoint(dir.file("t.safetensors")), CorruptHeader);
    }
    SUBCASE("header length beyond file") {
        std::vector<std::uint8_t> b(8, 0);
        b[0] = 0xFF;
        b[1] = 0xFF;
        write_bytes(dir.file("l.safetensors"), b);
        CHECK_THROWS_WITH_AS(read_checkpoint(dir.file("l.safetensors")),
                             doctest::Contains("byte offset"), CorruptHeader);
    }
    SUBCASE("overlapping offsets") {
        std::string header =
            R"({"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},)"
            R"("b":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}})";
        std::vector<std::uint8_t> bytes;
        std::uint64_t len = header.size();
        for (int i = 0; i < 8; ++i) bytes.push_back(std::uint8_t((len >> (8 * i)) & 0xFF));
        bytes.insert(bytes.end(), header.begin(), header.end());
        for (int i = 0; i < 8; ++i) bytes.push_back(0);
        write_bytes(dir.file("o.safetensors"), bytes);
        CHECK_THROWS_AS(read_checkpoint(dir.file("o.safetensors")), CorruptHeader);
    }
    SUBCASE("bad JSON") {
        std::string header = "{not json";
        std::vector<std::uint8_t> bytes;
        std::uint64_t len = header.size();
        for (int i = 0; i < 8; ++i) bytes.push_back(std::uint8_t((len >> (8 * i)) & 0xFF));
        bytes.insert(bytes.end(), header.begin(), header.end());
        write_bytes(dir.file("j.safetensors"), bytes);
        CHECK_THROWS_WITH_AS(read_checkpoint(dir.file("j.safetensors")),
                             doctest::Contains("byte offset"), CorruptHeader);
    }
    SUBCASE("size disagrees with shape") {
        std::string header = R"({"w":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}})";
        std::vector<std::uint8_t> bytes;
        std::uint64_t len = header.size();
        for (int i = 0; i < 8; ++i) bytes.push_back(std::uint8_t((len >> (8 * i)) & 0xFF));
        bytes.insert(bytes.end(), header.begin(), header.end());
        for (int i = 0; i < 8; ++i) bytes.push_back(0);
        write_bytes(dir.file("s.safetensors"), bytes);
        CHECK_THROWS_AS(read_checkpoint(dir.file("s.safetensors")), CorruptHeader);
    }
}

TEST_CASE("unknown dtypes load as opaque blobs and survive a round trip") {
    TempDir dir;
    std::string header = R"({"idx":{"dtype":"I64","shape":[2],"data_offsets":[0,16]}})";
    std::vector<std::uint8_t> bytes;
    std::uint64_t len = header.size();
    for (int i = 0; i < 8; ++i) bytes.push_back(std::uint8_t((len >> (8 * i)) & 0xFF));
    bytes.insert(bytes.end(), header.begin(), header.end());
    for (int i = 0; i < 16; ++i) bytes.push_back(std::uint8_t(i));
    fs::path p = dir.file("opaque.safetensors");
    write_bytes(p, bytes);

    Checkpoint c = read_checkpoint(p);
    CHECK(c.entries.empty());
    REQUIRE(c.opaque.count("idx") == 1);
    CHECK(c.opaque.at("idx").dtype == "I64");
    CHECK(c.opaque.at("idx").bytes.size() == 16);

    write_checkpoint(c, dir.file("opaque2.safetensors"));
    Checkpoint back = read_checkpoint(dir.file("opaque2.safetensors"));
    CHECK(back.opaque.at("idx") == c.opaque.at("idx"));
}

TEST_CASE("validate_alignment") {
    Checkpoint a, b;
    a.entries.emplace("w", Tensor({2, 3}, DType::F32));
    b.entries.emplace("w", Tensor({2, 3}, DType::F32));
    SUBCASE("identical checkpoints are ok") {
        AlignmentReport rep = validate_alignment({a, b});
        CHECK(rep.ok);
        CHECK(rep.missing.empty());
        CHECK(rep.shape_conflicts.empty());
    }
    SUBCASE("extra tensor flags the owning model") {
        Checkpoint c = b;
        c.entries.emplace("extra", Tensor({1}, DType::F32));
        AlignmentReport rep = validate_alignment({a, c});
        CHECK_FALSE(rep.ok);
        REQUIRE(rep.missing.size() == 1);
        CHECK(rep.missing[0].find("model 0") != std::string::npos);
        CHECK(rep.missing[0].find("extra") != std::string::npos);
    }
    SUBCASE("shape conflict reports both shapes") {
        Checkpoint c;
        c.entries.emplace("w", Tensor({3, 2}, DType::F32));
        AlignmentReport rep = validate_alignment({a, c});
        CHECK_FALSE(rep.ok);
        REQUIRE(rep.shape_conflicts.size() == 1);
        CHECK(rep.shape_conflicts[0].find("[2,3]") != std::string::npos);
        CHECK(rep.shape_conflicts[0].find("[3,2]") != std::string::npos);
    }
}

TEST_CASE("recipe parsing") {
    SUBCASE("minimal recipe fills defaults") {
        RecipeDocument doc = parse_recipe_text(
            R"({"strategy":"average","model_paths":["a","b"],"output_path":"o"})", "test");
        CHECK(doc.recipe.strategy == Strategy::average);
        CHECK(doc.recipe.lambda == 1.0);
        CHECK(doc.recipe.trim_fraction == 0.2);
        CHECK(doc.recipe.nan_mode == NanMode::off);
        CHECK(doc.recipe.norm_source == NormSource::full_weights);  // no base given
        CHECK(doc.recipe.apply_global_scale);
        CHECK(doc.model_paths == std::vector<std::string>{"a", "b"});
    }
    SUBCASE("base path flips the default norm source") {
        RecipeDocument doc = parse_recipe_text(
            R"({"strategy":"task_arithmetic","base_path":"base","model_paths":["a"],"output_path":"o"})",
            "test");
        CHECK(doc.recipe.norm_source == NormSource::task_vectors);
    }
    SUBCASE("unknown key is fatal and named") {
        CHECK_THROWS_WITH_AS(
            parse_recipe_text(
                R"({"strategy":"average","lamda":0.5,"model_paths":["a"],"output_path":"o"})",
                "test"),
            doctest::Contains("lamda"), RecipeParseError);
    }
    SUBCASE("ties without base is a semantic error") {
        CHECK_THROWS_AS(
            parse_recipe_text(R"({"strategy":"ties","model_paths":["a"],"output_path":"o"})",
                              "test"),
            RecipeInvalid);
    }
    SUBCASE("trim fraction must be in range") {
        CHECK_THROWS_AS(
            parse_recipe_text(
                R"({"strategy":"average","trim_fraction":0.0,"model_paths":["a"],"output_path":"o"})",
                "test"),
            RecipeInvalid);
    }
}
