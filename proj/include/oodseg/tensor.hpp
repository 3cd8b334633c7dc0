#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

// Core raster types shared by every pipeline stage, plus the on-disk
// tensor container (JSON manifest + raw little-endian f64 payload).
// Layout is row-major, channels-last: element (i,j,c) lives at flat
// index (i*width + j)*channels + c.

namespace oodseg {

inline std::size_t flat_index(int i, int j, int c, int width, int channels) {
    return (static_cast<std::size_t>(i) * width + j) * channels + c;
}

struct SpectralImage {
    int height = 0;
    int width = 0;
    int bands = 0;
    std::vector<double> data;  // height*width*bands

    double& at(int i, int j, int b) { return data[flat_index(i, j, b, width, bands)]; }
    double at(int i, int j, int b) const { return data[flat_index(i, j, b, width, bands)]; }
};

// Label 0 = unlabelled during training / negative-outlier during evaluation.
struct SparseAnnotation {
    int height = 0;
    int width = 0;
    int num_classes = 0;
    std::vector<int> labels;  // values in {0, 1, ..., num_classes}

    int& at(int i, int j) { return labels[static_cast<std::size_t>(i) * width + j]; }
    int at(int i, int j) const { return labels[static_cast<std::size_t>(i) * width + j]; }
};

struct LogitVolume {
    int height = 0;
    int width = 0;
    int num_classes = 0;
    std::vector<double> data;

    double& at(int i, int j, int c) { return data[flat_index(i, j, c, width, num_classes)]; }
    double at(int i, int j, int c) const { return data[flat_index(i, j, c, width, num_classes)]; }
};

struct FeatureVolume {
    int height = 0;
    int width = 0;
    int dim = 0;
    std::vector<double> data;

    double& at(int i, int j, int c) { return data[flat_index(i, j, c, width, dim)]; }
    double at(int i, int j, int c) const { return data[flat_index(i, j, c, width, dim)]; }
};

// Per-pixel class scores in [0,1], rows sum to 1.
struct ScoreVolume {
    int height = 0;
    int width = 0;
    int num_classes = 0;
    std::vector<double> data;

    double& at(int i, int j, int c) { return data[flat_index(i, j, c, width, num_classes)]; }
    double at(int i, int j, int c) const { return data[flat_index(i, j, c, width, num_classes)]; }
};

// Label 0 means the pixel was rejected as OOD/background.
struct PredictionMask {
    int height = 0;
    int width = 0;
    std::vector<int> labels;

    int& at(int i, int j) { return labels[static_cast<std::size_t>(i) * width + j]; }
    int at(int i, int j) const { return labels[static_cast<std::size_t>(i) * width + j]; }
};

// ---------------------------------------------------------------------------
// CRC-32 (IEEE, reflected) over a byte buffer.

inline std::uint32_t crc32(const unsigned char* buf, std::size_t len) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t n = 0; n < 256; ++n) {
            std::uint32_t c = n;
            for (int k = 0; k < 8; ++k)
                c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[n] = c;
        }
        return t;
    }();
    std::uint32_t c = 0xFFFFFFFFu;
    for (std::size_t i = 0; i < len; ++i)
        c = table[(c ^ buf[i]) & 0xFFu] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

// ---------------------------------------------------------------------------
// Tensor container: <path>.json manifest + <path>.bin raw payload.
// The payload is the flattened row-major data as little-endian f64.

namespace detail {

inline void append_le_f64(std::vector<unsigned char>& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int k = 0; k < 8; ++k)
        out.push_back(static_cast<unsigned char>((bits >> (8 * k)) & 0xFFu));
}

inline double read_le_f64(const unsigned char* p) {
    std::uint64_t bits = 0;
    for (int k = 0; k < 8; ++k)
        bits |= static_cast<std::uint64_t>(p[k]) << (8 * k);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

}  // namespace detail

inline void write_tensor(const std::string& path, const std::vector<std::size_t>& shape,
                         const std::vector<double>& data) {
    std::size_t prod = 1;
    for (std::size_t s : shape) prod *= s;
    if (prod != data.size())
        throw std::invalid_argument("write_tensor: shape product " + std::to_string(prod) +
                                    " != data length " + std::to_string(data.size()));

    std::vector<unsigned char> raw;
    raw.reserve(data.size() * 8);
    for (double v : data) detail::append_le_f64(raw, v);

    const std::filesystem::path base(path);
    const std::string bin_name = base.filename().string() + ".bin";

    std::ofstream binf(path + ".bin", std::ios::binary | std::ios::trunc);
    if (!binf) throw std::runtime_error("write_tensor: cannot open " + path + ".bin");
    binf.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!binf) throw std::runtime_error("write_tensor: write failed for " + path + ".bin");
    binf.close();

    nlohmann::json manifest;
    manifest["dtype"] = "f64";
    manifest["byte_order"] = "little-endian";
    manifest["shape"] = shape;
    manifest["data_file"] = bin_name;
    manifest["crc32"] = crc32(raw.data(), raw.size());

    std::ofstream mf(path + ".json", std::ios::trunc);
    if (!mf) throw std::runtime_error("write_tensor: cannot open " + path + ".json");
    mf << manifest.dump(2) << "\n";
    if (!mf) throw std::runtime_error("write_tensor: write failed for " + path + ".json");
}

inline std::pair<std::vector<std::size_t>, std::vector<double>> read_tensor(const std::string& path) {
    std::ifstream mf(path + ".json");
    if (!mf) throw std::runtime_error("read_tensor: missing manifest " + path + ".json");
    nlohmann::json manifest = nlohmann::json::parse(mf);

    if (manifest.at("dtype").get<std::string>() != "f64")
        throw std::runtime_error("read_tensor: unknown dtype " + manifest.at("dtype").get<std::string>());
    if (manifest.at("byte_order").get<std::string>() != "little-endian")
        throw std::runtime_error("read_tensor: unknown byte order");

    std::vector<std::size_t> shape = manifest.at("shape").get<std::vector<std::size_t>>();
    std::size_t prod = 1;
    for (std::size_t s : shape) prod *= s;

    const std::filesystem::path bin_path =
        std::filesystem::path(path).parent_path() / manifest.at("data_file").get<std::string>();
    std::ifstream binf(bin_path, std::ios::binary);
    if (!binf) throw std::runtime_error("read_tensor: missing payload " + bin_path.string());
    std::vector<unsigned char> raw((std::istreambuf_iterator<char>(binf)),
                                   std::istreambuf_iterator<char>());

    if (raw.size() != prod * 8)
        throw std::runtime_error("read_tensor: payload size " + std::to_string(raw.size()) +
                                 " inconsistent with shape product " + std::to_string(prod));
    if (crc32(raw.data(), raw.size()) != manifest.at("crc32").get<std::uint32_t>())
        throw std::runtime_error("read_tensor: checksum mismatch for " + bin_path.string());

    std::vector<double> data(prod);
    for (std::size_t i = 0; i < prod; ++i) data[i] = detail::read_le_f64(raw.data() + i * 8);
    return {std::move(shape), std::move(data)};
}

}  // namespace oodseg
