#pragma once

// CSV export/import. Doubles are printed with %.17g so parsed values are
// bit-identical to the written ones.
//
//   vector:   token_id,value
//   matrix:   token_id,value0,...,value{m-1}
//   spectrum: index,sigma

#include <Eigen/Dense>
#include <string>

#include "llmimg/types.hpp"

namespace llmimg {

std::string format_double(double x);  // %.17g

void write_vector_csv(const std::string& path, const Eigen::VectorXd& values);
Eigen::VectorXd read_vector_csv(const std::string& path);

void write_matrix_csv(const std::string& path, const Eigen::MatrixXd& m);
Eigen::MatrixXd read_matrix_csv(const std::string& path);

void write_spectrum_csv(const std::string& path, const SingularSpectrum& s);

}  // namespace llmimg
