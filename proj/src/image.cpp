#include "dermagan/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "dermagan/archive.hpp"
#include "dermagan/error.hpp"

namespace dermagan {

ImageTensor make_image(const torch::Tensor& chw, std::string source_id) {
  auto t = chw.detach();
  if (t.dim() == 4 && t.size(0) == 1) t = t.squeeze(0);
  if (t.dim() != 3 || t.size(0) != 3)
    throw InvalidArgument("image tensor must have shape [3, H, W]");
  return {t.to(torch::kFloat32).clamp(-1.0, 1.0).contiguous(), std::move(source_id)};
}

torch::Tensor stack_images(std::span<const ImageTensor> images) {
  if (images.empty()) throw InvalidArgument("stack_images: empty list");
  std::vector<torch::Tensor> ts;
  ts.reserve(images.size());
  for (const auto& im : images) ts.push_back(im.pixels);
  return torch::stack(ts).to(torch::kFloat32);
}

std::vector<std::uint8_t> to_rgb8(const ImageTensor& image) {
  auto hwc = ((image.pixels.clamp(-1.0, 1.0) + 1.0) * 127.5)
                 .round()
                 .clamp(0, 255)
                 .to(torch::kUInt8)
                 .permute({1, 2, 0})
                 .contiguous();
  const auto* p = hwc.data_ptr<std::uint8_t>();
  return {p, p + hwc.numel()};
}

ImageTensor from_rgb8(std::span<const std::uint8_t> rgb, int width, int height,
                      std::string source_id) {
  if (rgb.size() != static_cast<std::size_t>(width) * height * 3)
    throw InvalidArgument("from_rgb8: buffer size mismatch");
  auto t = torch::from_blob(const_cast<std::uint8_t*>(rgb.data()), {height, width, 3}, torch::kUInt8)
               .to(torch::kFloat32)
               .permute({2, 0, 1})
               .contiguous();
  return {t / 127.5 - 1.0, std::move(source_id)};
}

namespace {

struct PngWriteBuffer {
  std::string bytes;
};

void png_append(png_structp png, png_bytep data, png_size_t len) {
  auto* buf = static_cast<PngWriteBuffer*>(png_get_io_ptr(png));
  buf->bytes.append(reinterpret_cast<const char*>(data), len);
}

void png_flush_noop(png_structp) {}

struct PngReadCursor {
  std::string_view bytes;
  std::size_t pos = 0;
};

void png_consume(png_structp png, png_bytep out, png_size_t len) {
  auto* cur = static_cast<PngReadCursor*>(png_get_io_ptr(png));
  if (cur->pos + len > cur->bytes.size()) png_error(png, "truncated PNG stream");
  std::memcpy(out, cur->bytes.data() + cur->pos, len);
  cur->pos += len;
}

}  // namespace

std::string encode_png(const ImageTensor& image) {
  const int h = static_cast<int>(image.pixels.size(1));
  const int w = static_cast<int>(image.pixels.size(2));
  auto rgb = to_rgb8(image);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png: cannot allocate writer");
  png_infop info = png_create_info_struct(png);
  PngWriteBuffer buf;
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png: encode failed");
  }
  png_set_write_fn(png, &buf, png_append, png_flush_noop);
  png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < h; ++y) png_write_row(png, rgb.data() + static_cast<std::size_t>(y) * w * 3);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return std::move(buf.bytes);
}

ImageTensor decode_png(std::string_view bytes, std::string source_id) {
  if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0)
    throw IoError("png: not a PNG stream");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png: cannot allocate reader");
  png_infop info = png_create_info_struct(png);
  PngReadCursor cur{bytes, 0};
  std::vector<std::uint8_t> rgb;
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("png: decode failed");
  }
  png_set_read_fn(png, &cur, png_consume);
  png_read_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const int color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color & PNG_COLOR_MASK_ALPHA || png_get_valid(png, info, PNG_INFO_tRNS))
    png_set_strip_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8)
    png_set_expand_gray_1_2_4_to_8(png);
  png_read_update_info(png, info);
  if (png_get_rowbytes(png, info) != static_cast<png_size_t>(w) * 3)
    png_error(png, "unexpected row layout");
  rgb.resize(static_cast<std::size_t>(w) * h * 3);
  std::vector<png_bytep> rows(h);
  for (int y = 0; y < h; ++y) rows[y] = rgb.data() + static_cast<std::size_t>(y) * w * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return from_rgb8(rgb, w, h, std::move(source_id));
}

void write_png(const std::filesystem::path& path, const ImageTensor& image) {
  atomic_write(path, encode_png(image));
}

ImageTensor read_png(const std::filesystem::path& path, std::string source_id) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_png(bytes, source_id.empty() ? path.filename().string() : std::move(source_id));
}

ImageTensor standardize(const ImageTensor& image, int resolution) {
  auto t = image.pixels;
  const auto h = t.size(1), w = t.size(2);
  if (h != w) {
    const auto s = std::min(h, w);
    t = t.narrow(1, (h - s) / 2, s).narrow(2, (w - s) / 2, s);
  }
  if (t.size(1) == resolution) return {t.contiguous(), image.source_id};
  namespace F = torch::nn::functional;
  auto opts = F::InterpolateFuncOptions().size(std::vector<int64_t>{resolution, resolution});
  if (t.size(1) > resolution)
    opts.mode(torch::kArea);
  else
    opts.mode(torch::kBilinear).align_corners(false);
  auto out = F::interpolate(t.unsqueeze(0), opts).squeeze(0);
  return make_image(out, image.source_id);
}

std::vector<ImageTensor> read_png_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<ImageTensor> out;
  out.reserve(files.size());
  for (const auto& f : files) out.push_back(read_png(f));
  return out;
}

}  // namespace dermagan
