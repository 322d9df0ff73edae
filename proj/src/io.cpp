#include "gsc/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

namespace gsc::io {

using json = nlohmann::json;

namespace {

std::ifstream open_in(const fs::path& path, std::ios::openmode mode = std::ios::in) {
  std::ifstream in(path, mode);
  if (!in) throw InputError("cannot open '" + path.string() + "' for reading");
  return in;
}

std::ofstream open_out(const fs::path& path, std::ios::openmode mode = std::ios::out) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, mode);
  if (!out) throw InputError("cannot open '" + path.string() + "' for writing");
  return out;
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',' || c == ';' || c == '\t') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

bool parse_double(const std::string& field, double& v) {
  std::size_t pos = 0;
  const auto first = field.find_first_not_of(" \t");
  if (first == std::string::npos) return false;
  try {
    v = std::stod(field.substr(first), &pos);
  } catch (...) {
    return false;
  }
  return field.find_first_not_of(" \t", first + pos) == std::string::npos;
}

json matrix_to_json(const Eigen::MatrixXd& M) {
  json a = json::array();
  for (Eigen::Index r = 0; r < M.rows(); ++r)
    for (Eigen::Index c = 0; c < M.cols(); ++c) a.push_back(M(r, c));
  return a;
}

Eigen::MatrixXd matrix_from_json(const json& j, Eigen::Index rows, Eigen::Index cols, const char* name) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows * cols)
    throw InputError(std::string("params JSON: '") + name + "' must be a flat array of " +
                     std::to_string(rows * cols) + " numbers");
  Eigen::MatrixXd M(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) M(r, c) = j.at(static_cast<std::size_t>(r * cols + c)).get<double>();
  return M;
}

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw InputError("binary dataset: truncated header");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

void put_f64(std::ostream& os, double d) { put_u64(os, std::bit_cast<std::uint64_t>(d)); }

std::string pgm_token(std::istream& in) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(c);
  }
  return tok;
}

}  // namespace

std::string read_text(const fs::path& path) {
  auto in = open_in(path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  auto out = open_out(path);
  out << text;
}

Eigen::MatrixXd read_csv_matrix(const fs::path& path) {
  auto in = open_in(path);
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
    const auto fields = split_fields(line);
    std::vector<double> row;
    row.reserve(fields.size());
    bool numeric = true;
    for (const auto& f : fields) {
      double v;
      if (!parse_double(f, v)) {
        numeric = false;
        break;
      }
      row.push_back(v);
    }
    if (!numeric) {
      if (rows.empty()) continue;  // header line
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": non-numeric field");
    }
    if (!rows.empty() && row.size() != rows.front().size())
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": inconsistent column count");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw InputError(path.string() + ": no numeric rows");
  Eigen::MatrixXd M(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c) M(r, c) = rows[r][c];
  return M;
}

void write_csv_matrix(const fs::path& path, const Eigen::MatrixXd& M, const std::vector<std::string>& header) {
  auto out = open_out(path);
  out << std::setprecision(17);
  for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
  if (!header.empty()) out << '\n';
  for (Eigen::Index r = 0; r < M.rows(); ++r) {
    for (Eigen::Index c = 0; c < M.cols(); ++c) out << (c ? "," : "") << M(r, c);
    out << '\n';
  }
}

Datasetd read_dataset(const fs::path& path) {
  Datasetd d;
  if (path.extension() == ".csv") {
    d.Y = read_csv_matrix(path);
  } else {
    auto in = open_in(path, std::ios::binary);
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "GSCD", 4) != 0)
      throw InputError(path.string() + ": not a GSCD binary dataset");
    const std::uint64_t D = get_u64(in), N = get_u64(in);
    if (D == 0 || N == 0 || D > (1u << 20) || N > (std::uint64_t{1} << 34))
      throw InputError(path.string() + ": implausible dataset shape");
    d.Y.resize(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(D));
    for (std::uint64_t n = 0; n < N; ++n)
      for (std::uint64_t j = 0; j < D; ++j) d.Y(n, j) = std::bit_cast<double>(get_u64(in));
  }
  d.provenance = "file:" + path.string();
  d.validate();
  return d;
}

void write_dataset_csv(const fs::path& path, const Datasetd& data) { write_csv_matrix(path, data.Y); }

void write_dataset_binary(const fs::path& path, const Datasetd& data) {
  auto out = open_out(path, std::ios::binary);
  out.write("GSCD", 4);
  put_u64(out, static_cast<std::uint64_t>(data.D()));
  put_u64(out, static_cast<std::uint64_t>(data.N()));
  for (Eigen::Index n = 0; n < data.Y.rows(); ++n)
    for (Eigen::Index j = 0; j < data.Y.cols(); ++j) put_f64(out, data.Y(n, j));
}

std::string params_to_json(const ModelParamsd& p) {
  json j;
  j["D"] = p.D();
  j["H"] = p.H();
  j["noise_mode"] = to_string(p.noise_mode);
  j["W"] = matrix_to_json(p.W);
  j["Sigma"] = matrix_to_json(p.Sigma);
  j["pi"] = matrix_to_json(p.pi);
  j["mu"] = matrix_to_json(p.mu);
  j["Psi"] = matrix_to_json(p.Psi);
  return j.dump(2);
}

ModelParamsd params_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw InputError(std::string("params JSON: ") + e.what());
  }
  try {
    const int D = j.at("D").get<int>(), H = j.at("H").get<int>();
    if (D < 1 || H < 1) throw InputError("params JSON: D and H must be positive");
    ModelParamsd p;
    p.noise_mode = noise_mode_from_string(j.at("noise_mode").get<std::string>());
    p.W = matrix_from_json(j.at("W"), D, H, "W");
    p.Sigma = matrix_from_json(j.at("Sigma"), D, D, "Sigma");
    p.pi = matrix_from_json(j.at("pi"), H, 1, "pi");
    p.mu = matrix_from_json(j.at("mu"), H, 1, "mu");
    p.Psi = matrix_from_json(j.at("Psi"), H, H, "Psi");
    return p;
  } catch (const json::exception& e) {
    throw InputError(std::string("params JSON: ") + e.what());
  }
}

ModelParamsd read_params(const fs::path& path) { return params_from_json(read_text(path)); }
void write_params(const fs::path& path, const ModelParamsd& p) { write_text(path, params_to_json(p) + "\n"); }

GrayImage<double> read_pgm(const fs::path& path) {
  auto in = open_in(path, std::ios::binary);
  if (pgm_token(in) != "P5") throw InputError(path.string() + ": only binary PGM (P5) is supported");
  int cols = 0, rows = 0, maxval = 0;
  try {
    cols = std::stoi(pgm_token(in));
    rows = std::stoi(pgm_token(in));
    maxval = std::stoi(pgm_token(in));
  } catch (...) {
    throw InputError(path.string() + ": malformed PGM header");
  }
  if (cols < 1 || rows < 1 || maxval < 1 || maxval > 255)
    throw InputError(path.string() + ": unsupported PGM geometry or depth");
  std::vector<unsigned char> buf(static_cast<std::size_t>(rows) * cols);
  if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
    throw InputError(path.string() + ": truncated PGM data");
  GrayImage<double> img;
  img.pixels.resize(rows, cols);
  const double scale = 255.0 / maxval;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) img.pixels(r, c) = buf[static_cast<std::size_t>(r) * cols + c] * scale;
  return img;
}

void write_pgm(const fs::path& path, const GrayImage<double>& img) {
  auto out = open_out(path, std::ios::binary);
  out << "P5\n" << img.cols() << ' ' << img.rows() << "\n255\n";
  std::vector<unsigned char> buf(static_cast<std::size_t>(img.rows()) * img.cols());
  for (int r = 0; r < img.rows(); ++r)
    for (int c = 0; c < img.cols(); ++c)
      buf[static_cast<std::size_t>(r) * img.cols() + c] =
          static_cast<unsigned char>(std::clamp(std::lround(img.pixels(r, c)), 0L, 255L));
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

void write_trace_csv(const fs::path& path, const std::vector<EmTrace>& trace) {
  auto out = open_out(path);
  out << "iteration,log_likelihood,max_param_delta,wall_time_ms\n" << std::setprecision(17);
  for (const auto& t : trace)
    out << t.iteration << ',' << t.log_likelihood << ',' << t.param_deltas.max() << ',' << t.wall_time_ms << '\n';
}

void write_metrics_csv(const fs::path& path, const std::vector<MetricReport>& metrics) {
  auto out = open_out(path);
  out << "name,value,n_trials,std\n" << std::setprecision(17);
  for (const auto& m : metrics) out << m.name << ',' << m.value << ',' << m.n_trials << ',' << m.std << '\n';
}

void write_metrics_json(const fs::path& path, const std::vector<MetricReport>& metrics) {
  json a = json::array();
  for (const auto& m : metrics) {
    json e{{"name", m.name}, {"n_trials", m.n_trials}, {"std", m.std}};
    // JSON has no infinity; PSNR of identical images is reported as null.
    e["value"] = std::isfinite(m.value) ? json(m.value) : json(nullptr);
    a.push_back(e);
  }
  write_text(path, a.dump(2) + "\n");
}

GrayImage<double> basis_grid(const Eigen::MatrixXd& W, int p) {
  if (p < 1 || W.rows() != static_cast<Eigen::Index>(p) * p)
    throw DimensionError("basis_grid: W rows must equal p*p");
  const int H = static_cast<int>(W.cols());
  const int per_row = std::max(1, static_cast<int>(std::ceil(std::sqrt(double(H)))));
  const int grid_rows = (H + per_row - 1) / per_row;
  GrayImage<double> img;
  img.pixels = Eigen::MatrixXd::Constant(grid_rows * (p + 1) + 1, per_row * (p + 1) + 1, 0.0);
  for (int h = 0; h < H; ++h) {
    const double m = W.col(h).cwiseAbs().maxCoeff();
    const int r0 = 1 + (h / per_row) * (p + 1), c0 = 1 + (h % per_row) * (p + 1);
    for (int i = 0; i < p; ++i)
      for (int j = 0; j < p; ++j)
        img.pixels(r0 + i, c0 + j) = m > 0 ? 127.5 * (1.0 + W(i * p + j, h) / m) : 127.5;
  }
  return img;
}

}  // namespace gsc::io
