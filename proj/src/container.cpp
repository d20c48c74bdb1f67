#include "llmimg/container.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "json.hpp"

#include "llmimg/algebra.hpp"
#include "llmimg/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "LLMIMG containers are little-endian; big-endian hosts need a "
              "byte-swapping reader");

namespace llmimg {

std::string prompts_digest_hex(const std::vector<std::string>& prompts) {
    uint64_t h = 14695981039346656037ull;
    for (const std::string& p : prompts) {
        for (unsigned char c : p) {
            h ^= c;
            h *= 1099511628211ull;
        }
        h ^= 0;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(h));
    return buf;
}

void write_image(const std::string& path, const ModelImage& image) {
    if (image.matrix.size() == 0) {
        raise(ErrorCode::invalid_argument, "write_image: empty matrix");
    }
    nlohmann::json header{
        {"version", kImageVersion},
        {"v", image.matrix.rows()},
        {"m", image.matrix.cols()},
        {"d_estimate", image.d_estimate},
        {"tolerance", image.tolerance},
        {"source_id", image.source_id},
        {"created_at", image.created_at},
        {"prompts_digest", prompts_digest_hex(image.prompts)},
        {"space", "clr"},
    };
    const std::string header_text = header.dump();
    if (header_text.size() > 0xffffffffull) {
        raise(ErrorCode::invalid_argument, "write_image: header too large");
    }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        raise(ErrorCode::io_error, "write_image: cannot open " + path);
    }
    out.write(kImageMagic, sizeof kImageMagic);
    const uint32_t len = static_cast<uint32_t>(header_text.size());
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(header_text.data(),
              static_cast<std::streamsize>(header_text.size()));
    // Eigen matrices are column-major by default: the buffer is already in
    // file order.
    out.write(reinterpret_cast<const char*>(image.matrix.data()),
              static_cast<std::streamsize>(sizeof(double) *
                                           image.matrix.size()));
    out.flush();
    if (!out) {
        raise(ErrorCode::io_error, "write_image: short write to " + path);
    }
}

ModelImage read_image(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        raise(ErrorCode::io_error, "read_image: cannot open " + path);
    }
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kImageMagic, sizeof magic) != 0) {
        raise(ErrorCode::io_error, "read_image: bad magic in " + path);
    }
    uint32_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!in) {
        raise(ErrorCode::io_error, "read_image: truncated header length");
    }
    std::string header_text(len, '\0');
    in.read(header_text.data(), len);
    if (!in) {
        raise(ErrorCode::io_error, "read_image: truncated header");
    }

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_text);
    } catch (const nlohmann::json::exception& e) {
        raise(ErrorCode::io_error,
              std::string("read_image: invalid header JSON: ") + e.what());
    }

    ModelImage image;
    int64_t v = 0;
    int64_t m = 0;
    try {
        if (header.at("version").get<uint32_t>() != kImageVersion) {
            raise(ErrorCode::io_error, "read_image: unsupported version");
        }
        if (header.at("space").get<std::string>() != "clr") {
            raise(ErrorCode::io_error, "read_image: unsupported space");
        }
        v = header.at("v").get<int64_t>();
        m = header.at("m").get<int64_t>();
        image.d_estimate = header.at("d_estimate").get<int>();
        image.tolerance = header.at("tolerance").get<double>();
        image.source_id = header.at("source_id").get<std::string>();
        image.created_at = header.at("created_at").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        raise(ErrorCode::io_error,
              std::string("read_image: header field missing: ") + e.what());
    }
    if (v < 2 || m < 1) {
        raise(ErrorCode::io_error, "read_image: bad dimensions");
    }

    image.matrix.resize(v, m);
    in.read(reinterpret_cast<char*>(image.matrix.data()),
            static_cast<std::streamsize>(sizeof(double) * v * m));
    if (!in || in.gcount() !=
                   static_cast<std::streamsize>(sizeof(double) * v * m)) {
        raise(ErrorCode::io_error, "read_image: truncated matrix data");
    }

    const RankResult rank = numerical_rank(image.matrix, image.tolerance);
    if (rank.rank != image.d_estimate) {
        raise(ErrorCode::io_error,
              "read_image: stored d_estimate " +
                  std::to_string(image.d_estimate) +
                  " does not match recomputed rank " +
                  std::to_string(rank.rank));
    }
    image.spectrum = rank.spectrum;
    return image;
}

}  // namespace llmimg
