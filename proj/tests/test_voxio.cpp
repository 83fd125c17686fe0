// Synthetic solids, latent encoding, and both file formats. The volume
// checks compare voxel counts against closed-form solid volumes; the file
// tests exercise every declared failure kind on deliberately broken bytes.

#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>

#include "volt3d/voxio.hpp"

using namespace volt3d;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

std::string read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_bytes(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    REQUIRE(out.good());
}

IoErrorKind kind_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const IoError& e) {
        return e.kind();
    }
    FAIL("expected an IoError");
    return IoErrorKind::bad_value;
}

}  // namespace

TEST_CASE("category names are distinct and bounded") {
    std::set<std::string> names;
    for (std::size_t c = 0; c < kNumCategories; ++c) names.insert(category_name(c));
    CHECK(names.size() == kNumCategories);
    CHECK_THROWS_AS(category_name(kNumCategories), std::invalid_argument);
}

TEST_CASE("voxelized sphere volume approaches the analytic volume") {
    const double r = 0.7;
    const auto grid = solids::sphere(32, 0.0, 0.0, 0.0, r);
    const double cell = 2.0 / 32.0;
    const double measured = occupancy_fraction(grid) * 8.0;  // domain volume is 2^3
    const double analytic = 4.0 / 3.0 * std::acos(-1.0) * r * r * r;
    CHECK(measured == Catch::Approx(analytic).epsilon(0.02));
    // Finer grid, tighter agreement.
    const auto fine = solids::sphere(64, 0.0, 0.0, 0.0, r);
    const double measured_fine = occupancy_fraction(fine) * 8.0;
    CHECK(std::abs(measured_fine - analytic) < std::abs(measured - analytic) + cell * cell);
    CHECK(measured_fine == Catch::Approx(analytic).epsilon(0.01));
}

TEST_CASE("voxelized torus volume matches 2 pi^2 R r^2") {
    // The octahedron would be the other closed-form candidate, but its flat
    // diagonal faces resonate with the voxel lattice and the count oscillates
    // for small grids. The torus boundary is curved everywhere, so voxel
    // centers equidistribute across it.
    const double ring = 0.6, tube = 0.25;
    const auto grid = solids::torus(32, ring, tube);
    const double measured = occupancy_fraction(grid) * 8.0;
    const double analytic = 2.0 * std::acos(-1.0) * std::acos(-1.0) * ring * tube * tube;
    CHECK(measured == Catch::Approx(analytic).epsilon(0.02));
}

TEST_CASE("solid generation is a pure function of category and seed") {
    const auto a = make_solid(7, 16, Seed{91});
    const auto b = make_solid(7, 16, Seed{91});
    CHECK(max_abs_diff(a, b) == 0.0);

    const auto other_seed = make_solid(7, 16, Seed{92});
    CHECK(max_abs_diff(a, other_seed) > 0.0);  // jitter changed the torus

    const auto other_cat = make_solid(2, 16, Seed{91});
    CHECK(max_abs_diff(a, other_cat) > 0.0);

    CHECK_THROWS_AS(make_solid(kNumCategories, 8, Seed{1}), std::invalid_argument);
}

TEST_CASE("every category rasterizes to a non-degenerate binary grid") {
    for (std::size_t c = 0; c < kNumCategories; ++c) {
        for (std::uint64_t s = 0; s < 3; ++s) {
            const auto grid = make_solid(c, 16, Seed{1000 + s});
            const double occ = occupancy_fraction(grid);
            INFO("category " << category_name(c) << " seed " << s << " occupancy " << occ);
            CHECK(occ > 0.01);
            CHECK(occ < 0.95);
            for (std::size_t i = 0; i < grid.size(); ++i) {
                const float v = grid.at_flat(i);
                REQUIRE((v == 0.0f || v == 1.0f));
            }
        }
    }
}

TEST_CASE("classification dataset is balanced and prefix-stable") {
    const auto small = make_classification_dataset(5, 8, Seed{7});
    const auto big = make_classification_dataset(30, 8, Seed{7});
    REQUIRE(small.size() == 5);
    REQUIRE(big.size() == 30);
    for (std::size_t i = 0; i < small.size(); ++i) {
        CHECK(small[i].label == static_cast<int>(i % kNumCategories));
        CHECK(max_abs_diff(small[i].grid, big[i].grid) == 0.0);
    }
    // Each class appears either floor or ceil of count/classes times.
    std::vector<int> counts(kNumCategories, 0);
    for (const auto& s : big) ++counts[static_cast<std::size_t>(s.label)];
    for (int c : counts) CHECK((c == 2 || c == 3));
}

TEST_CASE("latent encoder is deterministic and noise is seed-controlled") {
    const auto grid = make_solid(0, 16, Seed{3});
    const LatentEncoder enc(Seed{11});
    const auto clean_a = enc.encode(grid, Seed{100}, 0.0);
    const auto clean_b = enc.encode(grid, Seed{999}, 0.0);
    REQUIRE(clean_a.shape() == Shape{kLatentDim});
    CHECK(max_abs_diff(clean_a, clean_b) == 0.0);  // no noise, noise seed inert

    const auto noisy_a = enc.encode(grid, Seed{100}, 0.05);
    const auto noisy_a2 = enc.encode(grid, Seed{100}, 0.05);
    const auto noisy_b = enc.encode(grid, Seed{101}, 0.05);
    CHECK(max_abs_diff(noisy_a, noisy_a2) == 0.0);
    CHECK(max_abs_diff(noisy_a, noisy_b) > 0.0);
    CHECK(max_abs_diff(noisy_a, clean_a) < 0.5);  // noise is a small perturbation

    const LatentEncoder other(Seed{12});
    CHECK(max_abs_diff(other.encode(grid, Seed{100}, 0.0), clean_a) > 0.0);

    Tensor<float> bad({12, 12, 12});
    CHECK_THROWS_AS(enc.encode(bad, Seed{0}, 0.0), std::invalid_argument);
}

TEST_CASE("reconstruction dataset pairs a latent with the grid it encodes") {
    const auto rec = make_reconstruction_dataset(4, 16, Seed{7}, 0.01);
    const auto cls = make_classification_dataset(4, 16, Seed{7});
    REQUIRE(rec.size() == 4);
    for (std::size_t i = 0; i < rec.size(); ++i) {
        CHECK(rec[i].latent.shape() == Shape{kLatentDim});
        CHECK(max_abs_diff(rec[i].grid, cls[i].grid) == 0.0);
    }
    // Distinct samples get distinct latents.
    CHECK(max_abs_diff(rec[0].latent, rec[1].latent) > 0.0);
}

TEST_CASE("packed grid file round trip preserves every voxel") {
    // 9^3 = 729 voxels exercises the partial trailing byte.
    const auto grid = make_solid(4, 9, Seed{21});
    const auto path = temp_path("volt3d_roundtrip_packed.vox");
    write_vox3(path, grid, true);
    const auto back = read_vox3(path);
    REQUIRE(back.shape() == grid.shape());
    CHECK(max_abs_diff(back, grid) == 0.0);
    // Packed payload is 4+1+1+2 header bytes plus ceil(729/8).
    CHECK(read_bytes(path).size() == 8 + (729 + 7) / 8);
    std::remove(path.c_str());
}

TEST_CASE("float grid file round trip preserves soft values") {
    Tensor<float> grid({5, 5, 5});
    for (std::size_t i = 0; i < grid.size(); ++i) {
        grid.at_flat(i) = static_cast<float>(i) / 124.0f;
    }
    const auto path = temp_path("volt3d_roundtrip_f32.vox");
    write_vox3(path, grid, false);
    const auto back = read_vox3(path);
    CHECK(max_abs_diff(back, grid) == 0.0);
    std::remove(path.c_str());
}

TEST_CASE("grid writer rejects bad inputs") {
    Tensor<float> soft({4, 4, 4});
    soft.at_flat(0) = 0.5f;
    CHECK_THROWS_AS(write_vox3(temp_path("volt3d_never.vox"), soft, true),
                    std::invalid_argument);
    Tensor<float> flat({4, 4});
    CHECK_THROWS_AS(write_vox3(temp_path("volt3d_never.vox"), flat, true),
                    std::invalid_argument);
    Tensor<float> oblong({2, 3, 4});
    CHECK_THROWS_AS(write_vox3(temp_path("volt3d_never.vox"), oblong, false),
                    std::invalid_argument);
}

TEST_CASE("grid reader classifies every malformed input") {
    const auto path = temp_path("volt3d_broken.vox");
    const auto grid = make_solid(0, 8, Seed{5});
    write_vox3(path, grid, true);
    const auto good = read_bytes(path);

    CHECK(kind_of([&] { read_vox3(temp_path("volt3d_missing.vox")); }) ==
          IoErrorKind::file_missing);

    write_bytes(path, "VOXX" + good.substr(4));
    CHECK(kind_of([&] { read_vox3(path); }) == IoErrorKind::bad_magic);

    auto bad_version = good;
    bad_version[4] = 9;
    write_bytes(path, bad_version);
    CHECK(kind_of([&] { read_vox3(path); }) == IoErrorKind::bad_header);

    auto bad_tag = good;
    bad_tag[5] = 2;
    write_bytes(path, bad_tag);
    CHECK(kind_of([&] { read_vox3(path); }) == IoErrorKind::bad_header);

    auto zero_res = good;
    zero_res[6] = 0;
    zero_res[7] = 0;
    write_bytes(path, zero_res);
    CHECK(kind_of([&] { read_vox3(path); }) == IoErrorKind::bad_header);

    write_bytes(path, good.substr(0, good.size() - 3));
    CHECK(kind_of([&] { read_vox3(path); }) == IoErrorKind::truncated);

    write_bytes(path, good + "xx");
    CHECK(kind_of([&] { read_vox3(path); }) == IoErrorKind::truncated);

    write_bytes(path, good.substr(0, 3));
    CHECK(kind_of([&] { read_vox3(path); }) == IoErrorKind::truncated);

    // Non-finite float payload.
    Tensor<float> nan_grid({2, 2, 2});
    nan_grid.at_flat(3) = std::numeric_limits<float>::quiet_NaN();
    write_vox3(path, nan_grid, false);
    CHECK(kind_of([&] { read_vox3(path); }) == IoErrorKind::bad_value);

    std::remove(path.c_str());
}

TEST_CASE("checkpoint round trip restores every parameter bitwise") {
    const auto spec = build_spec("tiny", ConvFlavor::dw, 8, 5);
    auto source = build_runtime<float>(spec, Seed{42});
    auto target = build_runtime<float>(spec, Seed{77});

    const auto path = temp_path("volt3d_ckpt_roundtrip.vwt");
    write_checkpoint(path, spec.arch, spec.flavor, source.params());

    bool differed_before = false;
    auto src_params = source.params();
    auto dst_params = target.params();
    REQUIRE(src_params.size() == dst_params.size());
    for (std::size_t i = 0; i < src_params.size(); ++i) {
        if (max_abs_diff(*src_params[i].value, *dst_params[i].value) > 0.0) differed_before = true;
    }
    REQUIRE(differed_before);

    const auto header = read_checkpoint_into(path, target.params());
    CHECK(header.arch == "tiny");
    CHECK(header.flavor == "dw");
    for (std::size_t i = 0; i < src_params.size(); ++i) {
        INFO(src_params[i].name);
        CHECK(max_abs_diff(*src_params[i].value, *dst_params[i].value) == 0.0);
    }
    std::remove(path.c_str());
}

TEST_CASE("checkpoints convert between float and double widths") {
    const auto spec = build_spec("tiny", ConvFlavor::standard, 8, 3);
    auto wide = build_runtime<double>(spec, Seed{9});
    auto narrow = build_runtime<float>(spec, Seed{10});

    const auto path = temp_path("volt3d_ckpt_width.vwt");
    write_checkpoint(path, spec.arch, spec.flavor, wide.params());
    read_checkpoint_into(path, narrow.params());

    auto w = wide.params();
    auto n = narrow.params();
    for (std::size_t i = 0; i < w.size(); ++i) {
        INFO(w[i].name);
        for (std::size_t j = 0; j < w[i].value->size(); ++j) {
            CHECK(n[i].value->at_flat(j) ==
                  Catch::Approx(w[i].value->at_flat(j)).margin(1e-6));
        }
    }
    std::remove(path.c_str());
}

TEST_CASE("loading a checkpoint of another flavor names the first absent tensor") {
    const auto path = temp_path("volt3d_ckpt_flavor.vwt");
    auto standard = build_runtime<float>(build_spec("tiny", ConvFlavor::standard, 8, 3), Seed{1});
    write_checkpoint(path, "tiny", ConvFlavor::standard, standard.params());

    auto dw = build_runtime<float>(build_spec("tiny", ConvFlavor::dw, 8, 3), Seed{1});
    try {
        read_checkpoint_into(path, dw.params());
        FAIL("expected a missing tensor error");
    } catch (const IoError& e) {
        CHECK(e.kind() == IoErrorKind::missing_tensor);
        CHECK(std::string(e.what()).find("conv1_1.dw.weights") != std::string::npos);
    }
    std::remove(path.c_str());
}

TEST_CASE("shape mismatches and failed loads leave the model untouched") {
    const auto path = temp_path("volt3d_ckpt_shape.vwt");
    auto small = build_runtime<float>(build_spec("tiny", ConvFlavor::standard, 8, 3), Seed{1});
    write_checkpoint(path, "tiny", ConvFlavor::standard, small.params());

    auto big = build_runtime<float>(build_spec("tiny", ConvFlavor::standard, 16, 3), Seed{2});
    std::vector<Tensor<float>> before;
    for (const auto& p : big.params()) before.push_back(*p.value);

    try {
        read_checkpoint_into(path, big.params());
        FAIL("expected a shape mismatch");
    } catch (const IoError& e) {
        CHECK(e.kind() == IoErrorKind::shape_mismatch);
        CHECK(std::string(e.what()).find("fc1.weights") != std::string::npos);
    }
    auto after = big.params();
    for (std::size_t i = 0; i < after.size(); ++i) {
        CHECK(max_abs_diff(*after[i].value, before[i]) == 0.0);
    }
    std::remove(path.c_str());
}

TEST_CASE("checkpoint with tensors the model does not own is rejected") {
    const auto path = temp_path("volt3d_ckpt_extra.vwt");
    auto model = build_runtime<float>(build_spec("tiny", ConvFlavor::standard, 8, 3), Seed{1});
    write_checkpoint(path, "tiny", ConvFlavor::standard, model.params());

    // Present the reader with a model that lacks the final dense layer.
    auto params = model.params();
    std::vector<ParamRef<float>> subset(params.begin(), params.end() - 1);
    try {
        read_checkpoint_into(path, subset);
        FAIL("expected an extra tensor error");
    } catch (const IoError& e) {
        CHECK(e.kind() == IoErrorKind::extra_tensor);
        CHECK(std::string(e.what()).find(params.back().name) != std::string::npos);
    }
    std::remove(path.c_str());
}

TEST_CASE("checkpoint reader classifies corrupt bytes") {
    const auto path = temp_path("volt3d_ckpt_corrupt.vwt");
    auto model = build_runtime<float>(build_spec("tiny", ConvFlavor::standard, 8, 3), Seed{1});
    write_checkpoint(path, "tiny", ConvFlavor::standard, model.params());
    const auto good = read_bytes(path);

    write_bytes(path, "nonsense");
    CHECK(kind_of([&] { read_checkpoint_into(path, model.params()); }) == IoErrorKind::bad_magic);

    write_bytes(path, good.substr(0, good.size() / 2));
    CHECK(kind_of([&] { read_checkpoint_into(path, model.params()); }) == IoErrorKind::truncated);

    write_bytes(path, good + "y");
    CHECK(kind_of([&] { read_checkpoint_into(path, model.params()); }) == IoErrorKind::bad_header);

    auto bad_width = good;
    // Tensor records start after magic, version, both strings and the count.
    // Corrupting the first tensor's element-width byte: locate it by replaying
    // the header lengths.
    std::size_t pos = 4 + 1;
    const auto arch_len = static_cast<std::uint8_t>(good[pos]);  // little-endian u16, low byte
    pos += 2 + arch_len;
    const auto flav_len = static_cast<std::uint8_t>(good[pos]);
    pos += 2 + flav_len + 4;
    const auto name_len = static_cast<std::uint8_t>(good[pos]);
    pos += 2 + name_len;
    const auto rank = static_cast<std::uint8_t>(good[pos]);
    pos += 1 + 8 * rank;
    REQUIRE(static_cast<std::uint8_t>(good[pos]) == 4);  // f32 records
    bad_width[pos] = 3;
    write_bytes(path, bad_width);
    CHECK(kind_of([&] { read_checkpoint_into(path, model.params()); }) == IoErrorKind::bad_header);

    std::remove(path.c_str());
}

TEST_CASE("duplicate tensor names in a checkpoint are rejected") {
    const auto path = temp_path("volt3d_ckpt_dup.vwt");
    Tensor<float> a({2}), grad({2});
    std::vector<ParamRef<float>> twice = {{"w", &a, &grad}, {"w", &a, &grad}};
    write_checkpoint(path, "tiny", ConvFlavor::standard, twice);
    CHECK(kind_of([&] { read_checkpoint_into(path, twice); }) == IoErrorKind::bad_header);
    std::remove(path.c_str());
}

TEST_CASE("nearest neighbor on raw voxels separates the categories") {
    // A trivial baseline must already do well on the generated data,
    // otherwise a classifier cannot be expected to learn it.
    const std::size_t res = 8;
    const auto train = make_classification_dataset(4 * kNumCategories, res, Seed{500});
    const auto test = make_classification_dataset(kNumCategories, res, Seed{901});

    std::size_t correct = 0;
    for (const auto& probe : test) {
        double best = 1e300;
        int best_label = -1;
        for (const auto& cand : train) {
            double d = 0;
            for (std::size_t i = 0; i < probe.grid.size(); ++i) {
                const double diff = probe.grid.at_flat(i) - cand.grid.at_flat(i);
                d += diff * diff;
            }
            if (d < best) {
                best = d;
                best_label = cand.label;
            }
        }
        if (best_label == probe.label) ++correct;
    }
    INFO("1-NN got " << correct << " of " << test.size());
    CHECK(correct >= 10);  // 13 probes, tolerate a few near-duplicates
}
