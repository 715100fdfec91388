#include <catch2/catch_amalgamated.hpp>
#include <filesystem>

#include "editshield/image.hpp"
#include "editshield/rng.hpp"

using namespace editshield;
namespace fs = std::filesystem;

namespace {
fs::path temp_dir() {
    fs::path p = fs::temp_directory_path() / "editshield_image_test";
    fs::create_directories(p);
    return p;
}
}  // namespace

TEST_CASE("png round trip preserves 8-bit pixels exactly") {
    Rng rng(21);
    ImageBuffer img(16, 12);
    for (auto& p : img.pixels) p = static_cast<float>(rng.uniform());
    img = quantize8(img);

    const fs::path path = temp_dir() / "roundtrip.png";
    save_png(img, path.string());
    ImageBuffer back = load_image(path.string());
    REQUIRE(back.height == 16);
    REQUIRE(back.width == 12);
    for (size_t i = 0; i < img.count(); ++i) REQUIRE(back.pixels[i] == Catch::Approx(img.pixels[i]).margin(1e-6));
}

TEST_CASE("non-png output is refused") {
    ImageBuffer img(8, 8);
    REQUIRE_THROWS_AS(save_png(img, (temp_dir() / "x.jpg").string()), Error);
}

TEST_CASE("in-memory png encoding matches file encoding") {
    ImageBuffer img(8, 8);
    for (size_t i = 0; i < img.count(); ++i) img.pixels[i] = static_cast<float>(i % 256) / 255.0f;
    auto bytes = encode_png(img);
    REQUIRE(bytes.size() > 8);
    REQUIRE(bytes[1] == 'P');
}

TEST_CASE("bilinear resize is identity at same size and interpolates means") {
    ImageBuffer img(8, 8);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x)
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = (x < 4) ? 0.0f : 1.0f;

    ImageBuffer same = resize_bilinear(img, 8, 8);
    REQUIRE(same.pixels == img.pixels);

    ImageBuffer down = resize_bilinear(img, 4, 4);
    REQUIRE(down.at(0, 0, 0) == 0.0f);
    REQUIRE(down.at(0, 3, 0) == 1.0f);

    double mean_src = 0, mean_dst = 0;
    for (float p : img.pixels) mean_src += p;
    for (float p : down.pixels) mean_dst += p;
    REQUIRE(mean_dst / down.count() == Catch::Approx(mean_src / img.count()).margin(0.05));
}

TEST_CASE("image validation rejects bad buffers") {
    ImageBuffer tiny(4, 4);
    REQUIRE_THROWS_AS(tiny.validate(), Error);
    ImageBuffer bad(8, 8);
    bad.pixels[3] = 2.0f;
    REQUIRE_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("nchw conversion round trips") {
    Rng rng(5);
    ImageBuffer img(9, 10);
    for (auto& p : img.pixels) p = static_cast<float>(rng.uniform());
    ImageBuffer back = nchw_to_image(image_to_nchw(img));
    REQUIRE(back.pixels == img.pixels);
}
