#include "modim/image_io.hpp"

#include <png.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <vector>

namespace modim::io {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

std::string ext_of(const std::string& path) {
    auto dot = path.rfind('.');
    return dot == std::string::npos ? "" : path.substr(dot);
}

}  // namespace

torch::Tensor read_png(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) fail("cannot open " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info) fail("png init failed");
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        fail("png read error: " + path);
    }
    png_init_io(png, f.get());
    png_read_info(png, info);

    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    int depth = png_get_bit_depth(png, info);
    int color = png_get_color_type(png, info);

    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color & PNG_COLOR_MASK_COLOR) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (depth == 16) png_set_swap(png);  // little-endian rows
    png_read_update_info(png, info);
    depth = png_get_bit_depth(png, info);

    auto out = torch::empty({static_cast<int64_t>(h), static_cast<int64_t>(w)}, torch::kFloat);
    auto acc = out.accessor<float, 2>();
    std::vector<png_byte> row(png_get_rowbytes(png, info));
    const double scale = depth == 16 ? 65535.0 : 255.0;
    for (png_uint_32 y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (png_uint_32 x = 0; x < w; ++x) {
            double v = depth == 16 ? reinterpret_cast<uint16_t*>(row.data())[x] : row[x];
            acc[y][x] = static_cast<float>(v / scale);
        }
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

namespace {

void write_png_impl(const std::string& path, const torch::Tensor& img, int bit_depth, bool raw) {
    TORCH_CHECK(img.dim() == 2, "png writer expects a (H, W) map");
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) fail("cannot open " + path + " for writing");

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info) fail("png init failed");
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        fail("png write error: " + path);
    }
    png_init_io(png, f.get());
    const auto h = img.size(0), w = img.size(1);
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), bit_depth,
                 PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    if (bit_depth == 16) png_set_swap(png);

    auto v = img.to(torch::kDouble).contiguous();
    auto acc = v.accessor<double, 2>();
    const double scale = bit_depth == 16 ? 65535.0 : 255.0;
    std::vector<png_byte> row(static_cast<size_t>(w) * (bit_depth == 16 ? 2 : 1));
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            double val = acc[y][x];
            if (!raw) val = std::min(1.0, std::max(0.0, val)) * scale;
            auto q = static_cast<uint32_t>(val + 0.5);
            if (bit_depth == 16) reinterpret_cast<uint16_t*>(row.data())[x] = static_cast<uint16_t>(q);
            else row[static_cast<size_t>(x)] = static_cast<png_byte>(q);
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace

void write_png(const std::string& path, const torch::Tensor& img, int bit_depth) {
    write_png_impl(path, img, bit_depth, false);
}

torch::Tensor read_png_labels(const std::string& path) {
    auto v = read_png(path);
    return (v * 255.0).round().to(torch::kLong);
}

void write_png_labels(const std::string& path, const torch::Tensor& labels) {
    TORCH_CHECK((labels < 256).all().item<bool>(), "label ids must fit 8-bit png");
    write_png_impl(path, labels.to(torch::kDouble), 8, true);
}

// --------------------------------------------------------------------------
// NIfTI-1
// --------------------------------------------------------------------------

namespace {

#pragma pack(push, 1)
struct NiftiHeader {
    int32_t sizeof_hdr = 348;
    char data_type[10] = {};
    char db_name[18] = {};
    int32_t extents = 0;
    int16_t session_error = 0;
    char regular = 'r';
    char dim_info = 0;
    int16_t dim[8] = {3, 1, 1, 1, 1, 1, 1, 1};
    float intent_p1 = 0, intent_p2 = 0, intent_p3 = 0;
    int16_t intent_code = 0;
    int16_t datatype = 16;  // float32
    int16_t bitpix = 32;
    int16_t slice_start = 0;
    float pixdim[8] = {1, 1, 1, 1, 1, 1, 1, 1};
    float vox_offset = 352;
    float scl_slope = 1, scl_inter = 0;
    int16_t slice_end = 0;
    char slice_code = 0, xyzt_units = 0;
    float cal_max = 0, cal_min = 0, slice_duration = 0, toffset = 0;
    int32_t glmax = 0, glmin = 0;
    char descrip[80] = {};
    char aux_file[24] = {};
    int16_t qform_code = 0, sform_code = 0;
    float quatern_b = 0, quatern_c = 0, quatern_d = 0;
    float qoffset_x = 0, qoffset_y = 0, qoffset_z = 0;
    float srow_x[4] = {}, srow_y[4] = {}, srow_z[4] = {};
    char intent_name[16] = {};
    char magic[4] = {'n', '+', '1', 0};
};
#pragma pack(pop)
static_assert(sizeof(NiftiHeader) == 348, "nifti header must be 348 bytes");

}  // namespace

torch::Tensor read_nifti(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("cannot open " + path);
    NiftiHeader hdr;
    in.read(reinterpret_cast<char*>(&hdr), sizeof(hdr));
    if (!in || hdr.sizeof_hdr != 348 || std::strncmp(hdr.magic, "n+1", 3) != 0)
        fail("not a nifti-1 file: " + path);
    if (hdr.datatype != 16) fail("only float32 nifti volumes are supported: " + path);
    if (hdr.dim[0] < 3) fail("expected a 3D nifti volume: " + path);

    // nifti stores x fastest; expose (D, H, W) = (dim3, dim2, dim1)
    const int64_t nx = hdr.dim[1], ny = hdr.dim[2], nz = hdr.dim[3];
    in.seekg(static_cast<std::streamoff>(hdr.vox_offset), std::ios::beg);
    auto vol = torch::empty({nz, ny, nx}, torch::kFloat);
    in.read(reinterpret_cast<char*>(vol.data_ptr<float>()),
            static_cast<std::streamsize>(nx * ny * nz * 4));
    if (!in) fail("truncated nifti data: " + path);
    return vol;
}

void write_nifti(const std::string& path, const torch::Tensor& vol) {
    TORCH_CHECK(vol.dim() == 3, "nifti writer expects a (D, H, W) volume");
    auto v = vol.to(torch::kFloat).contiguous();
    NiftiHeader hdr;
    hdr.dim[0] = 3;
    hdr.dim[1] = static_cast<int16_t>(v.size(2));
    hdr.dim[2] = static_cast<int16_t>(v.size(1));
    hdr.dim[3] = static_cast<int16_t>(v.size(0));

    std::ofstream out(path, std::ios::binary);
    if (!out) fail("cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(&hdr), sizeof(hdr));
    const char pad[4] = {};
    out.write(pad, 4);
    out.write(reinterpret_cast<const char*>(v.data_ptr<float>()),
              static_cast<std::streamsize>(v.numel() * 4));
    if (!out) fail("failed writing " + path);
}

torch::Tensor read_image(const std::string& path, bool labels) {
    const auto e = ext_of(path);
    if (e == ".png") return labels ? read_png_labels(path) : read_png(path);
    if (e == ".nii") {
        auto v = read_nifti(path);
        return labels ? v.round().to(torch::kLong) : v;
    }
    fail("unsupported image format: " + path);
}

void write_image(const std::string& path, const torch::Tensor& img, bool labels) {
    const auto e = ext_of(path);
    if (e == ".png") {
        if (labels) write_png_labels(path, img.to(torch::kLong));
        else write_png(path, img);
        return;
    }
    if (e == ".nii") {
        write_nifti(path, img);
        return;
    }
    fail("unsupported image format: " + path);
}

}  // namespace modim::io
