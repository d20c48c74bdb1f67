// On-disk formats: the LLMIMG binary container (bit-exact image storage)
// and CSV export/import (%.17g doubles, so text roundtrips preserve bits).

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <Eigen/Dense>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "llmimg/algebra.hpp"
#include "llmimg/container.hpp"
#include "llmimg/csv.hpp"
#include "llmimg/errors.hpp"
#include "llmimg/image.hpp"
#include "llmimg/mock_model.hpp"
#include "llmimg/rng.hpp"
#include "llmimg/session.hpp"

using namespace llmimg;

namespace {

std::filesystem::path temp_dir() {
    const auto dir = std::filesystem::temp_directory_path() /
                     "llmimg_container_tests";
    std::filesystem::create_directories(dir);
    return dir;
}

std::string path_in_temp(const std::string& name) {
    return (temp_dir() / name).string();
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(bool(in));
    std::string bytes((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
    return bytes;
}

void spit(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    REQUIRE(bool(out));
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// A small full-rank image with awkward doubles mixed in: negative zero,
// subnormals, values that don't survive short decimal printing.
ModelImage tricky_image() {
    GaussianStream g(4242);
    Eigen::MatrixXd m(10, 4);
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
        for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = g.next();
    }
    m(0, 0) = 0.1;
    m(1, 0) = 1.0 / 3.0;
    m(2, 1) = -0.0;
    m(3, 1) = 5e-324;   // smallest subnormal
    m(4, 2) = 1e-300;
    m(5, 2) = -1.0 / 7.0;
    m(6, 3) = 9.8765432112345678;

    ModelImage image;
    image.matrix = m;
    image.prompts = {"img:0", "img:1", "img:2", "img:3"};
    image.tolerance = 1e-6;
    image.source_id = "tricky";
    image.created_at = "2026-02-03T04:05:06Z";
    const RankResult rank = numerical_rank(image.matrix, image.tolerance);
    image.d_estimate = rank.rank;
    image.spectrum = rank.spectrum;
    return image;
}

bool bitwise_equal(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    return std::memcmp(a.data(), b.data(),
                       sizeof(double) * static_cast<std::size_t>(a.size())) ==
           0;
}

bool bitwise_equal(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    if (a.size() != b.size()) return false;
    return std::memcmp(a.data(), b.data(),
                       sizeof(double) * static_cast<std::size_t>(a.size())) ==
           0;
}

void check_io_error(const std::string& path) {
    try {
        (void)read_image(path);
        FAIL(("expected io_error for " + path));
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::io_error);
    }
}

// Corrupt a valid container by replacing a same-length substring of its
// header text, leaving every offset intact.
std::string patched(const std::string& bytes, const std::string& from,
                    const std::string& to) {
    REQUIRE(from.size() == to.size());
    std::string out = bytes;
    const auto pos = out.find(from);
    REQUIRE(pos != std::string::npos);
    out.replace(pos, from.size(), to);
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// prompts digest

TEST_CASE("prompt digest matches FNV-1a over NUL-terminated prompts") {
    // No prompts: the FNV-1a offset basis, untouched.
    CHECK(prompts_digest_hex({}) == "cbf29ce484222325");

    // Cross-check against the shared FNV-1a helper on an equivalent buffer.
    const auto reference = [](const std::vector<std::string>& prompts) {
        std::string buffer;
        for (const std::string& p : prompts) {
            buffer += p;
            buffer.push_back('\0');
        }
        char hex[17];
        std::snprintf(hex, sizeof hex, "%016llx",
                      static_cast<unsigned long long>(
                          fnv1a64(buffer.data(), buffer.size())));
        return std::string(hex);
    };
    CHECK(prompts_digest_hex({"a"}) == reference({"a"}));
    CHECK(prompts_digest_hex({"a", "b"}) == reference({"a", "b"}));
    CHECK(prompts_digest_hex({"img:0", "img:1", "img:2"}) ==
          reference({"img:0", "img:1", "img:2"}));

    // The NUL terminator keeps concatenations distinguishable.
    CHECK(prompts_digest_hex({"ab"}) != prompts_digest_hex({"a", "b"}));

    const std::string digest = prompts_digest_hex({"x"});
    CHECK(digest.size() == 16);
    CHECK(digest.find_first_not_of("0123456789abcdef") == std::string::npos);
}

// ---------------------------------------------------------------------------
// container roundtrip

TEST_CASE("container roundtrip preserves every bit and every header field") {
    const ModelImage image = tricky_image();
    const std::string path = path_in_temp("roundtrip.llmimg");
    write_image(path, image);

    const ModelImage loaded = read_image(path);
    CHECK(bitwise_equal(loaded.matrix, image.matrix));
    CHECK(loaded.d_estimate == image.d_estimate);
    CHECK(loaded.tolerance == image.tolerance);
    CHECK(loaded.source_id == "tricky");
    CHECK(loaded.created_at == "2026-02-03T04:05:06Z");
    CHECK(loaded.prompts.empty());  // the file stores only their digest

    // The spectrum is recomputed from the loaded matrix at the stored
    // tolerance -- identical input bits, identical output bits.
    const RankResult expected = numerical_rank(image.matrix, image.tolerance);
    CHECK(bitwise_equal(loaded.spectrum.values, expected.spectrum.values));

    // Serialization is deterministic: writing again produces the same file.
    const std::string again = path_in_temp("roundtrip2.llmimg");
    write_image(again, image);
    CHECK(slurp(again) == slurp(path));
}

TEST_CASE("container layout: magic, little-endian length, JSON header") {
    const ModelImage image = tricky_image();
    const std::string path = path_in_temp("layout.llmimg");
    write_image(path, image);
    const std::string bytes = slurp(path);

    REQUIRE(bytes.size() > 12);
    CHECK(bytes.substr(0, 8) == "LLMIMG01");

    uint32_t len = 0;
    std::memcpy(&len, bytes.data() + 8, sizeof len);
    REQUIRE(12 + len < bytes.size());
    const std::string header = bytes.substr(12, len);
    CHECK(header.front() == '{');
    CHECK(header.find("\"space\":\"clr\"") != std::string::npos);
    CHECK(header.find("\"source_id\":\"tricky\"") != std::string::npos);
    CHECK(header.find("\"prompts_digest\":\"" +
                      prompts_digest_hex(image.prompts) + "\"") !=
          std::string::npos);

    // Payload: exactly v*m little-endian binary64 values, column-major.
    const std::size_t payload = bytes.size() - 12 - len;
    CHECK(payload == sizeof(double) * 10 * 4);
    double first = 0.0;
    std::memcpy(&first, bytes.data() + 12 + len, sizeof first);
    CHECK(first == 0.1);  // matrix(0, 0), bit-exact
}

TEST_CASE("a collected image survives the container unchanged") {
    const auto model = [] {
        MockModelSpec spec;
        spec.v = 60;
        spec.d = 8;
        spec.seed = 31;
        return std::make_shared<const MockModel>(spec);
    }();
    auto session = make_in_process_session(model);
    CollectOptions options;
    options.margin = 5;
    options.source_id = "collected";
    const ModelImage image = collect_image(
        *session,
        [](ApiSession& s, const std::string& ctx) {
            return extract_fast(s, ctx, FastOptions{{}, 1});
        },
        options);

    const std::string path = path_in_temp("collected.llmimg");
    write_image(path, image);
    const ModelImage loaded = read_image(path);
    CHECK(bitwise_equal(loaded.matrix, image.matrix));
    CHECK(loaded.d_estimate == 8);

    // The loaded image drives the O(d) path exactly like the original.
    const ProbVector p = fast_extract(loaded, *session, "held:0");
    CHECK((p.values() - model->oracle_distribution("held:0").values())
              .cwiseAbs()
              .maxCoeff() <= 1e-6);
}

// ---------------------------------------------------------------------------
// container rejection

TEST_CASE("corrupted containers are rejected, not misread") {
    const ModelImage image = tricky_image();
    const std::string good_path = path_in_temp("good.llmimg");
    write_image(good_path, image);
    const std::string good = slurp(good_path);
    const std::string bad_path = path_in_temp("bad.llmimg");

    SUBCASE("missing file") { check_io_error(path_in_temp("absent.llmimg")); }

    SUBCASE("bad magic") {
        std::string bad = good;
        bad[0] = 'X';
        spit(bad_path, bad);
        check_io_error(bad_path);
    }

    SUBCASE("truncated before header length") {
        spit(bad_path, good.substr(0, 10));
        check_io_error(bad_path);
    }

    SUBCASE("truncated inside header") {
        spit(bad_path, good.substr(0, 20));
        check_io_error(bad_path);
    }

    SUBCASE("truncated matrix payload") {
        spit(bad_path, good.substr(0, good.size() - 8));
        check_io_error(bad_path);
    }

    SUBCASE("header is not JSON") {
        std::string bad = good;
        bad[13] = '#';  // clobber inside the JSON object
        spit(bad_path, bad);
        check_io_error(bad_path);
    }

    SUBCASE("unsupported version") {
        spit(bad_path, patched(good, "\"version\":1", "\"version\":9"));
        check_io_error(bad_path);
    }

    SUBCASE("unsupported coordinate space") {
        spit(bad_path, patched(good, "\"space\":\"clr\"", "\"space\":\"raw\""));
        check_io_error(bad_path);
    }

    SUBCASE("stored rank disagrees with the matrix") {
        spit(bad_path,
             patched(good, "\"d_estimate\":4", "\"d_estimate\":3"));
        check_io_error(bad_path);
    }

    SUBCASE("degenerate dimensions") {
        spit(bad_path, patched(good, "\"v\":10", "\"v\":-1"));
        check_io_error(bad_path);
    }
}

TEST_CASE("write_image argument validation") {
    ModelImage empty;
    try {
        write_image(path_in_temp("empty.llmimg"), empty);
        FAIL("expected invalid_argument");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::invalid_argument);
    }
    try {
        write_image("/nonexistent-dir/x.llmimg", tricky_image());
        FAIL("expected io_error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::io_error);
    }
}

// ---------------------------------------------------------------------------
// CSV

TEST_CASE("format_double prints %.17g") {
    CHECK(format_double(0.1) == "0.10000000000000001");
    CHECK(format_double(1.0) == "1");
    CHECK(format_double(-0.0) == "-0");
    CHECK(format_double(1e300) == "1.0000000000000001e+300");
    CHECK(format_double(1.0 / 3.0) == "0.33333333333333331");
}

TEST_CASE("vector CSV roundtrips bit for bit") {
    Eigen::VectorXd values(7);
    values << 0.1, 1.0 / 3.0, -0.0, 5e-324, 1e-300, -1.0 / 7.0,
        987654321.123456789;
    const std::string path = path_in_temp("vector.csv");
    write_vector_csv(path, values);

    const Eigen::VectorXd back = read_vector_csv(path);
    CHECK(bitwise_equal(back, values));

    const std::string text = slurp(path);
    CHECK(text.rfind("token_id,value\n0,0.10000000000000001\n", 0) == 0);
}

TEST_CASE("vector CSV rejects malformed input") {
    const std::string path = path_in_temp("bad_vector.csv");

    SUBCASE("empty file") {
        spit(path, "");
        CHECK_THROWS_AS((void)read_vector_csv(path), Error);
    }
    SUBCASE("non-consecutive token ids") {
        spit(path, "token_id,value\n1,0.5\n");
        CHECK_THROWS_AS((void)read_vector_csv(path), Error);
    }
    SUBCASE("bad numeric field") {
        spit(path, "token_id,value\n0,abc\n");
        CHECK_THROWS_AS((void)read_vector_csv(path), Error);
    }
    SUBCASE("wrong field count") {
        spit(path, "token_id,value\n0,1.0,2.0\n");
        CHECK_THROWS_AS((void)read_vector_csv(path), Error);
    }
}

TEST_CASE("vector CSV tolerates CRLF line endings") {
    const std::string path = path_in_temp("crlf.csv");
    spit(path, "token_id,value\r\n0,0.25\r\n1,0.75\r\n\r\n");
    const Eigen::VectorXd back = read_vector_csv(path);
    REQUIRE(back.size() == 2);
    CHECK(back(0) == 0.25);
    CHECK(back(1) == 0.75);
}

TEST_CASE("matrix CSV roundtrips bit for bit") {
    GaussianStream g(777);
    Eigen::MatrixXd m(7, 3);
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
        for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = g.next();
    }
    m(0, 0) = 0.1;
    m(6, 2) = 5e-324;

    const std::string path = path_in_temp("matrix.csv");
    write_matrix_csv(path, m);
    const Eigen::MatrixXd back = read_matrix_csv(path);
    CHECK(bitwise_equal(back, m));

    const std::string text = slurp(path);
    CHECK(text.rfind("token_id,value0,value1,value2\n", 0) == 0);
}

TEST_CASE("matrix CSV rejects malformed input") {
    const std::string path = path_in_temp("bad_matrix.csv");

    SUBCASE("bad header") {
        spit(path, "id,value0\n0,1.0\n");
        CHECK_THROWS_AS((void)read_matrix_csv(path), Error);
    }
    SUBCASE("inconsistent field count") {
        spit(path, "token_id,value0,value1\n0,1.0\n");
        CHECK_THROWS_AS((void)read_matrix_csv(path), Error);
    }
    SUBCASE("no data rows") {
        spit(path, "token_id,value0\n");
        CHECK_THROWS_AS((void)read_matrix_csv(path), Error);
    }
}

TEST_CASE("spectrum CSV uses 1-based indices") {
    SingularSpectrum s;
    s.values = Eigen::VectorXd(3);
    s.values << 3.0, 1.0, 0.5;
    s.rows = 10;
    s.cols = 3;
    const std::string path = path_in_temp("spectrum.csv");
    write_spectrum_csv(path, s);
    CHECK(slurp(path) == "index,sigma\n1,3\n2,1\n3,0.5\n");
}
