#pragma once

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "editshield/error.hpp"
#include "editshield/tensor.hpp"

namespace editshield {

// Pixel-space image, float32 in [0,1], HWC interleaved, always 3 channels.
struct ImageBuffer {
    int height = 0;
    int width = 0;
    int channels = 3;
    std::vector<float> pixels;
    std::string source_path;

    ImageBuffer() = default;
    ImageBuffer(int h, int w) : height(h), width(w), pixels(static_cast<size_t>(h) * w * 3, 0.0f) {}

    float& at(int y, int x, int c) { return pixels[(static_cast<size_t>(y) * width + x) * 3 + c]; }
    float at(int y, int x, int c) const { return pixels[(static_cast<size_t>(y) * width + x) * 3 + c]; }

    size_t count() const { return pixels.size(); }

    void validate() const {
        require(height >= 8 && width >= 8, ErrorKind::invalid_input, "image smaller than 8x8");
        require(channels == 3, ErrorKind::invalid_input, "image must have 3 channels");
        require(pixels.size() == static_cast<size_t>(height) * width * 3, ErrorKind::invalid_input,
                "image pixel count mismatch");
        for (float p : pixels)
            require(std::isfinite(p) && p >= 0.0f && p <= 1.0f, ErrorKind::invalid_input,
                    "image pixel outside [0,1] or non-finite");
    }
};

inline Tensor image_to_nchw(const ImageBuffer& img) {
    Tensor t({1, 3, img.height, img.width});
    const int hw = img.height * img.width;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c)
                t.v[static_cast<size_t>(c) * hw + static_cast<size_t>(y) * img.width + x] = img.at(y, x, c);
    return t;
}

inline ImageBuffer nchw_to_image(const Tensor& t) {
    require(t.ndim() == 4 && t.dim(0) == 1 && t.dim(1) == 3, ErrorKind::invalid_input,
            "expected [1,3,H,W] tensor");
    ImageBuffer img(t.dim(2), t.dim(3));
    const int hw = img.height * img.width;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(y, x, c) = std::clamp(t.v[static_cast<size_t>(c) * hw + static_cast<size_t>(y) * img.width + x],
                                             0.0f, 1.0f);
    return img;
}

inline ImageBuffer resize_bilinear(const ImageBuffer& src, int out_h, int out_w) {
    require(out_h >= 1 && out_w >= 1, ErrorKind::invalid_input, "bad resize target");
    if (out_h == src.height && out_w == src.width) return src;
    ImageBuffer dst(out_h, out_w);
    dst.source_path = src.source_path;
    const float sy = static_cast<float>(src.height) / out_h;
    const float sx = static_cast<float>(src.width) / out_w;
    for (int y = 0; y < out_h; ++y) {
        const float fy = std::max(0.0f, (y + 0.5f) * sy - 0.5f);
        const int y0 = std::min(static_cast<int>(fy), src.height - 1);
        const int y1 = std::min(y0 + 1, src.height - 1);
        const float wy = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            const float fx = std::max(0.0f, (x + 0.5f) * sx - 0.5f);
            const int x0 = std::min(static_cast<int>(fx), src.width - 1);
            const int x1 = std::min(x0 + 1, src.width - 1);
            const float wx = fx - x0;
            for (int c = 0; c < 3; ++c) {
                const float top = src.at(y0, x0, c) * (1 - wx) + src.at(y0, x1, c) * wx;
                const float bot = src.at(y1, x0, c) * (1 - wx) + src.at(y1, x1, c) * wx;
                dst.at(y, x, c) = top * (1 - wy) + bot * wy;
            }
        }
    }
    return dst;
}

// Snap to the 8-bit grid; what a PNG round trip would produce.
inline ImageBuffer quantize8(const ImageBuffer& src) {
    ImageBuffer out = src;
    for (auto& p : out.pixels) p = std::round(std::clamp(p, 0.0f, 1.0f) * 255.0f) / 255.0f;
    return out;
}

namespace detail {

inline std::vector<uint8_t> to_bytes(const ImageBuffer& img) {
    std::vector<uint8_t> buf(img.count());
    for (size_t i = 0; i < buf.size(); ++i)
        buf[i] = static_cast<uint8_t>(std::round(std::clamp(img.pixels[i], 0.0f, 1.0f) * 255.0f));
    return buf;
}

inline ImageBuffer from_bytes(const uint8_t* data, int h, int w, int stride_channels) {
    ImageBuffer img(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(y, x, c) =
                    static_cast<float>(data[(static_cast<size_t>(y) * w + x) * stride_channels + c]) / 255.0f;
    return img;
}

inline ImageBuffer read_jpeg(const std::string& path) {
    FILE* f = std::fopen(path.c_str(), "rb");
    require(f != nullptr, ErrorKind::io_error, "cannot open " + path);
    jpeg_decompress_struct cinfo;
    jpeg_error_mgr jerr;
    cinfo.err = jpeg_std_error(&jerr);
    jpeg_create_decompress(&cinfo);
    jpeg_stdio_src(&cinfo, f);
    if (jpeg_read_header(&cinfo, TRUE) != JPEG_HEADER_OK) {
        jpeg_destroy_decompress(&cinfo);
        std::fclose(f);
        raise(ErrorKind::io_error, "invalid JPEG header in " + path);
    }
    cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);
    const int w = static_cast<int>(cinfo.output_width);
    const int h = static_cast<int>(cinfo.output_height);
    std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
    ImageBuffer img(h, w);
    while (cinfo.output_scanline < cinfo.output_height) {
        uint8_t* rp = row.data();
        const int y = static_cast<int>(cinfo.output_scanline);
        jpeg_read_scanlines(&cinfo, &rp, 1);
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<float>(row[x * 3 + c]) / 255.0f;
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    std::fclose(f);
    img.source_path = path;
    return img;
}

inline ImageBuffer read_png(const std::string& path) {
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str()))
        raise(ErrorKind::io_error, std::string("PNG read failed: ") + image.message);
    image.format = PNG_FORMAT_RGB;
    std::vector<uint8_t> buf(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
        png_image_free(&image);
        raise(ErrorKind::io_error, std::string("PNG decode failed: ") + path);
    }
    ImageBuffer img = from_bytes(buf.data(), static_cast<int>(image.height), static_cast<int>(image.width), 3);
    img.source_path = path;
    return img;
}

}  // namespace detail

inline bool has_extension(const std::string& path, std::initializer_list<const char*> exts) {
    std::string e = std::filesystem::path(path).extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
    for (const char* x : exts)
        if (e == x) return true;
    return false;
}

inline ImageBuffer load_image(const std::string& path) {
    require(std::filesystem::exists(path), ErrorKind::io_error, "no such image file: " + path);
    FILE* f = std::fopen(path.c_str(), "rb");
    require(f != nullptr, ErrorKind::io_error, "cannot open " + path);
    uint8_t magic[4] = {0, 0, 0, 0};
    const size_t got = std::fread(magic, 1, 4, f);
    std::fclose(f);
    require(got == 4, ErrorKind::io_error, "file too short: " + path);
    if (magic[0] == 0x89 && magic[1] == 'P') return detail::read_png(path);
    if (magic[0] == 0xFF && magic[1] == 0xD8) return detail::read_jpeg(path);
    raise(ErrorKind::io_error, "unsupported image format (need PNG or JPEG): " + path);
}

inline void save_png(const ImageBuffer& img, const std::string& path) {
    require(has_extension(path, {".png"}), ErrorKind::invalid_input,
            "refusing non-PNG output (lossy formats would corrupt the image): " + path);
    std::vector<uint8_t> bytes = detail::to_bytes(img);
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(img.width);
    image.height = static_cast<png_uint_32>(img.height);
    image.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&image, path.c_str(), 0, bytes.data(), 0, nullptr))
        raise(ErrorKind::io_error, std::string("PNG write failed: ") + image.message);
}

inline std::vector<uint8_t> encode_png(const ImageBuffer& img) {
    std::vector<uint8_t> bytes = detail::to_bytes(img);
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(img.width);
    image.height = static_cast<png_uint_32>(img.height);
    image.format = PNG_FORMAT_RGB;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&image, nullptr, &size, 0, bytes.data(), 0, nullptr))
        raise(ErrorKind::io_error, "PNG size query failed");
    std::vector<uint8_t> out(size);
    if (!png_image_write_to_memory(&image, out.data(), &size, 0, bytes.data(), 0, nullptr))
        raise(ErrorKind::io_error, "PNG encode failed");
    out.resize(size);
    return out;
}

}  // namespace editshield
