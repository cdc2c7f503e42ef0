#include "mambacsr/image.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mambacsr/errors.hpp"

namespace mambacsr {

namespace {

struct PnmHeader {
  int width = 0;
  int height = 0;
  size_t data_offset = 0;
};

// Parses "P<digit>" then whitespace/comment-separated width, height, maxval.
PnmHeader parse_pnm_header(const std::string& path, const std::string& bytes,
                           char magic_digit) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != magic_digit) {
    throw ParseError(path + ": bad magic at offset 0, expected P" +
                     std::string(1, magic_digit));
  }
  size_t pos = 2;
  auto skip_space = [&]() {
    while (pos < bytes.size()) {
      const char c = bytes[pos];
      if (c == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&]() {
    skip_space();
    if (pos >= bytes.size() || bytes[pos] < '0' || bytes[pos] > '9') {
      throw ParseError(path + ": expected integer at offset " + std::to_string(pos));
    }
    long v = 0;
    while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
      v = v * 10 + (bytes[pos] - '0');
      if (v > 1'000'000'000L) {
        throw ParseError(path + ": oversized integer at offset " + std::to_string(pos));
      }
      ++pos;
    }
    return static_cast<int>(v);
  };
  PnmHeader h;
  h.width = read_int();
  h.height = read_int();
  const int maxval = read_int();
  if (h.width <= 0 || h.height <= 0) {
    throw ParseError(path + ": non-positive extents");
  }
  if (maxval != 255) {
    throw ParseError(path + ": unsupported maxval " + std::to_string(maxval) +
                     ", only 255 is supported");
  }
  if (pos >= bytes.size()) {
    throw ParseError(path + ": truncated header at offset " + std::to_string(pos));
  }
  // exactly one whitespace byte separates header from raster
  ++pos;
  h.data_offset = pos;
  return h;
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(path + ": cannot open for reading");
  std::ostringstream ss;
  ss << f.rdbuf();
  return std::move(ss).str();
}

void write_file_atomic(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError(tmp + ": cannot open for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) {
      f.close();
      std::remove(tmp.c_str());
      throw IoError(tmp + ": write failed");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::remove(tmp.c_str());
    throw IoError(path + ": rename failed: " + ec.message());
  }
}

}  // namespace

ImageU8 make_image(int height, int width, uint8_t fill) {
  if (height <= 0 || width <= 0) {
    throw InvariantError("make_image: non-positive extents");
  }
  ImageU8 img;
  img.height = height;
  img.width = width;
  img.data.assign(static_cast<size_t>(height) * width * 3, fill);
  return img;
}

ImageU8 read_ppm(const std::string& path) {
  const std::string bytes = read_file(path);
  const PnmHeader h = parse_pnm_header(path, bytes, '6');
  const size_t need = static_cast<size_t>(h.width) * h.height * 3;
  if (bytes.size() - h.data_offset < need) {
    throw ParseError(path + ": raster truncated at offset " +
                     std::to_string(bytes.size()) + ", need " +
                     std::to_string(h.data_offset + need) + " bytes");
  }
  ImageU8 img;
  img.height = h.height;
  img.width = h.width;
  img.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(h.data_offset),
                  bytes.begin() + static_cast<std::ptrdiff_t>(h.data_offset + need));
  return img;
}

void write_ppm(const std::string& path, const ImageU8& img) {
  if (img.height <= 0 || img.width <= 0 ||
      img.data.size() != static_cast<size_t>(img.height) * img.width * 3) {
    throw InvariantError("write_ppm: malformed image");
  }
  std::string bytes = "P6\n" + std::to_string(img.width) + " " +
                      std::to_string(img.height) + "\n255\n";
  bytes.append(reinterpret_cast<const char*>(img.data.data()), img.data.size());
  write_file_atomic(path, bytes);
}

GrayU8 read_pgm(const std::string& path) {
  const std::string bytes = read_file(path);
  const PnmHeader h = parse_pnm_header(path, bytes, '5');
  const size_t need = static_cast<size_t>(h.width) * h.height;
  if (bytes.size() - h.data_offset < need) {
    throw ParseError(path + ": raster truncated");
  }
  GrayU8 img;
  img.height = h.height;
  img.width = h.width;
  img.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(h.data_offset),
                  bytes.begin() + static_cast<std::ptrdiff_t>(h.data_offset + need));
  return img;
}

void write_pgm(const std::string& path, const GrayU8& img) {
  if (img.height <= 0 || img.width <= 0 ||
      img.data.size() != static_cast<size_t>(img.height) * img.width) {
    throw InvariantError("write_pgm: malformed image");
  }
  std::string bytes = "P5\n" + std::to_string(img.width) + " " +
                      std::to_string(img.height) + "\n255\n";
  bytes.append(reinterpret_cast<const char*>(img.data.data()), img.data.size());
  write_file_atomic(path, bytes);
}

}  // namespace mambacsr
