#pragma once

#include <filesystem>

#include "morph/tensor.hpp"

namespace morph {

inline constexpr int kFaceSize = 112;

// Aligned face image: [3,112,112] CHW, values in [-1,1]. 8-bit files are
// mapped by v/127.5 - 1 on load and inverted on save.
struct FaceImage {
  Tensor pixels;  // [3,112,112]

  static FaceImage from_tensor(Tensor t);
  bool valid_shape() const {
    return pixels.rank() == 3 && pixels.dim(0) == 3 && pixels.dim(1) == kFaceSize &&
           pixels.dim(2) == kFaceSize;
  }
};

// Throws ShapeError / ValidationError when the invariants fail.
void validate_face_image(const Tensor& pixels);

FaceImage load_face_png(const std::filesystem::path& path);
void save_face_png(const std::filesystem::path& path, const FaceImage& img);

// Raw 8-bit RGB helpers used by the synthetic data generator.
struct Rgb8Image {
  int width = 0, height = 0;
  std::vector<unsigned char> rgb;  // height*width*3
};
Rgb8Image load_png_rgb8(const std::filesystem::path& path);
void save_png_rgb8(const std::filesystem::path& path, const Rgb8Image& img);

FaceImage decode_face(const Rgb8Image& img);     // maps 8-bit to [-1,1]
Rgb8Image encode_face(const FaceImage& face);    // inverse mapping, clamped

// Stacks validated faces into an [N,3,112,112] batch tensor.
Tensor stack_faces(const std::vector<const FaceImage*>& faces);

}  // namespace morph
