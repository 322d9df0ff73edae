#ifndef GSC_IO_HPP
#define GSC_IO_HPP

// File formats. Everything here works on double precision.
//
//   datasets   CSV (one observation per row, optional header line) or the
//              binary layout "GSCD" | uint64 D | uint64 N | N*D float64,
//              all little-endian, row-major
//   params     JSON {"W","Sigma","pi","mu","Psi","noise_mode","D","H"} with
//              matrices stored as flat row-major arrays
//   images     8-bit binary PGM (P5)

#include <filesystem>
#include <string>
#include <vector>

#include "gsc/denoise.hpp"
#include "gsc/eval.hpp"
#include "gsc/exact_em.hpp"
#include "gsc/model.hpp"

namespace gsc::io {

namespace fs = std::filesystem;

Eigen::MatrixXd read_csv_matrix(const fs::path& path);
void write_csv_matrix(const fs::path& path, const Eigen::MatrixXd& M, const std::vector<std::string>& header = {});

Datasetd read_dataset(const fs::path& path);  // format chosen by extension (.csv, otherwise binary)
void write_dataset_csv(const fs::path& path, const Datasetd& data);
void write_dataset_binary(const fs::path& path, const Datasetd& data);

std::string params_to_json(const ModelParamsd& p);
ModelParamsd params_from_json(const std::string& text);
ModelParamsd read_params(const fs::path& path);
void write_params(const fs::path& path, const ModelParamsd& p);

GrayImage<double> read_pgm(const fs::path& path);
/// Rounds to the nearest integer and clips to [0, 255].
void write_pgm(const fs::path& path, const GrayImage<double>& img);

/// Columns iteration, log_likelihood, max_param_delta, wall_time_ms.
void write_trace_csv(const fs::path& path, const std::vector<EmTrace>& trace);
void write_metrics_csv(const fs::path& path, const std::vector<MetricReport>& metrics);
void write_metrics_json(const fs::path& path, const std::vector<MetricReport>& metrics);

/// Tiles the columns of W (each reshaped to p x p, row-major) into one image,
/// every tile scaled to [0, 255] by its own max |w|, with 1-pixel gaps.
GrayImage<double> basis_grid(const Eigen::MatrixXd& W, int p);

std::string read_text(const fs::path& path);
void write_text(const fs::path& path, const std::string& text);

}  // namespace gsc::io

#endif  // GSC_IO_HPP
