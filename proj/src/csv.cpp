#include "llmimg/csv.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <vector>

#include "llmimg/errors.hpp"

namespace llmimg {

std::string format_double(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

namespace {

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        raise(ErrorCode::io_error, "csv: cannot open " + path + " for writing");
    }
    return out;
}

std::ifstream open_in(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        raise(ErrorCode::io_error, "csv: cannot open " + path);
    }
    return in;
}

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string field;
    std::istringstream ss(line);
    while (std::getline(ss, field, ',')) {
        fields.push_back(field);
    }
    if (!line.empty() && line.back() == ',') {
        fields.push_back("");
    }
    return fields;
}

double parse_double(const std::string& s, const std::string& path) {
    char* end = nullptr;
    const double x = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || (end && *end != '\0' && *end != '\r')) {
        raise(ErrorCode::io_error,
              "csv: bad numeric field '" + s + "' in " + path);
    }
    return x;
}

}  // namespace

void write_vector_csv(const std::string& path, const Eigen::VectorXd& values) {
    std::ofstream out = open_out(path);
    out << "token_id,value\n";
    for (Eigen::Index i = 0; i < values.size(); ++i) {
        out << i << ',' << format_double(values(i)) << '\n';
    }
    out.flush();
    if (!out) {
        raise(ErrorCode::io_error, "csv: short write to " + path);
    }
}

Eigen::VectorXd read_vector_csv(const std::string& path) {
    std::ifstream in = open_in(path);
    std::string line;
    if (!std::getline(in, line)) {
        raise(ErrorCode::io_error, "csv: empty file " + path);
    }
    std::vector<double> values;
    int64_t expected = 0;
    while (std::getline(in, line)) {
        if (line.empty() || line == "\r") {
            continue;
        }
        const auto fields = split_line(line);
        if (fields.size() != 2) {
            raise(ErrorCode::io_error, "csv: expected 2 fields in " + path);
        }
        if (std::strtoll(fields[0].c_str(), nullptr, 10) != expected) {
            raise(ErrorCode::io_error,
                  "csv: token ids not consecutive from 0 in " + path);
        }
        values.push_back(parse_double(fields[1], path));
        ++expected;
    }
    Eigen::VectorXd out(static_cast<Eigen::Index>(values.size()));
    for (std::size_t i = 0; i < values.size(); ++i) {
        out(static_cast<Eigen::Index>(i)) = values[i];
    }
    return out;
}

void write_matrix_csv(const std::string& path, const Eigen::MatrixXd& m) {
    std::ofstream out = open_out(path);
    out << "token_id";
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
        out << ",value" << c;
    }
    out << '\n';
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        out << r;
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            out << ',' << format_double(m(r, c));
        }
        out << '\n';
    }
    out.flush();
    if (!out) {
        raise(ErrorCode::io_error, "csv: short write to " + path);
    }
}

Eigen::MatrixXd read_matrix_csv(const std::string& path) {
    std::ifstream in = open_in(path);
    std::string line;
    if (!std::getline(in, line)) {
        raise(ErrorCode::io_error, "csv: empty file " + path);
    }
    const auto header = split_line(line);
    if (header.size() < 2 || header[0] != "token_id") {
        raise(ErrorCode::io_error, "csv: bad matrix header in " + path);
    }
    const std::size_t cols = header.size() - 1;
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        if (line.empty() || line == "\r") {
            continue;
        }
        const auto fields = split_line(line);
        if (fields.size() != cols + 1) {
            raise(ErrorCode::io_error,
                  "csv: inconsistent field count in " + path);
        }
        std::vector<double> row(cols);
        for (std::size_t c = 0; c < cols; ++c) {
            row[c] = parse_double(fields[c + 1], path);
        }
        rows.push_back(std::move(row));
    }
    if (rows.empty()) {
        raise(ErrorCode::io_error, "csv: no data rows in " + path);
    }
    Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()),
                        static_cast<Eigen::Index>(cols));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
                rows[r][c];
        }
    }
    return out;
}

void write_spectrum_csv(const std::string& path, const SingularSpectrum& s) {
    std::ofstream out = open_out(path);
    out << "index,sigma\n";
    for (Eigen::Index i = 0; i < s.values.size(); ++i) {
        out << (i + 1) << ',' << format_double(s.values(i)) << '\n';
    }
    out.flush();
    if (!out) {
        raise(ErrorCode::io_error, "csv: short write to " + path);
    }
}

}  // namespace llmimg
