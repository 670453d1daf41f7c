#include "morph/image.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>

#include "morph/errors.hpp"

namespace morph {

void validate_face_image(const Tensor& pixels) {
  if (pixels.rank() != 3 || pixels.dim(0) != 3 || pixels.dim(1) != kFaceSize ||
      pixels.dim(2) != kFaceSize)
    throw ShapeError("face image must be [3,112,112], got " + pixels.shape_str());
  for (std::int64_t i = 0; i < pixels.numel(); ++i) {
    double v = pixels[i];
    if (!std::isfinite(v)) throw ValidationError("face image has non-finite pixels");
    if (v < -1.0 || v > 1.0)
      throw ValidationError("face image pixel outside [-1,1]");
  }
}

FaceImage FaceImage::from_tensor(Tensor t) {
  validate_face_image(t);
  return FaceImage{std::move(t)};
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

Rgb8Image load_png_rgb8(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw DataError("png: cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw DataError("png: read struct allocation failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw DataError("png: info struct allocation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("png: decode failed for " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  png_uint_32 width = png_get_image_width(png, info);
  png_uint_32 height = png_get_image_height(png, info);
  int color_type = png_get_color_type(png, info);
  int bit_depth = png_get_bit_depth(png, info);

  if (bit_depth == 16) png_set_strip_16(png);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  Rgb8Image img;
  img.width = static_cast<int>(width);
  img.height = static_cast<int>(height);
  img.rgb.resize(static_cast<std::size_t>(width) * height * 3);
  std::vector<png_bytep> rows(height);
  for (png_uint_32 y = 0; y < height; ++y)
    rows[y] = img.rgb.data() + static_cast<std::size_t>(y) * width * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void save_png_rgb8(const std::filesystem::path& path, const Rgb8Image& img) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw DataError("png: cannot open for write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw DataError("png: write struct allocation failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw DataError("png: info struct allocation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("png: encode failed for " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
               static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(img.height);
  for (int y = 0; y < img.height; ++y)
    rows[y] = const_cast<png_bytep>(img.rgb.data() + static_cast<std::size_t>(y) * img.width * 3);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

FaceImage decode_face(const Rgb8Image& img) {
  if (img.width != kFaceSize || img.height != kFaceSize)
    throw ShapeError("face image must be 112x112, got " + std::to_string(img.width) +
                     "x" + std::to_string(img.height));
  Tensor t({3, kFaceSize, kFaceSize});
  for (int y = 0; y < kFaceSize; ++y)
    for (int x = 0; x < kFaceSize; ++x)
      for (int c = 0; c < 3; ++c) {
        unsigned char v = img.rgb[(static_cast<std::size_t>(y) * kFaceSize + x) * 3 + c];
        t[(static_cast<std::int64_t>(c) * kFaceSize + y) * kFaceSize + x] =
            static_cast<double>(v) / 127.5 - 1.0;
      }
  return FaceImage{std::move(t)};
}

Rgb8Image encode_face(const FaceImage& face) {
  validate_face_image(face.pixels);
  Rgb8Image img;
  img.width = kFaceSize;
  img.height = kFaceSize;
  img.rgb.resize(static_cast<std::size_t>(kFaceSize) * kFaceSize * 3);
  for (int y = 0; y < kFaceSize; ++y)
    for (int x = 0; x < kFaceSize; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = face.pixels[(static_cast<std::int64_t>(c) * kFaceSize + y) * kFaceSize + x];
        double scaled = std::round((v + 1.0) * 127.5);
        scaled = std::min(255.0, std::max(0.0, scaled));
        img.rgb[(static_cast<std::size_t>(y) * kFaceSize + x) * 3 + c] =
            static_cast<unsigned char>(scaled);
      }
  return img;
}

Tensor stack_faces(const std::vector<const FaceImage*>& faces) {
  if (faces.empty()) throw ShapeError("stack_faces: empty batch");
  Tensor out({static_cast<int>(faces.size()), 3, kFaceSize, kFaceSize});
  std::int64_t per = 3ll * kFaceSize * kFaceSize;
  for (std::size_t i = 0; i < faces.size(); ++i) {
    validate_face_image(faces[i]->pixels);
    for (std::int64_t j = 0; j < per; ++j) out[i * per + j] = faces[i]->pixels[j];
  }
  return out;
}

FaceImage load_face_png(const std::filesystem::path& path) {
  return decode_face(load_png_rgb8(path));
}

void save_face_png(const std::filesystem::path& path, const FaceImage& img) {
  save_png_rgb8(path, encode_face(img));
}

}  // namespace morph
