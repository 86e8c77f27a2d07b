// SPDX-License-Identifier: Apache-2.0
#include "sublab/matrix_io.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "sublab/errors.hpp"

namespace sublab {

namespace {

std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

double parse_double(const std::string& s, const std::filesystem::path& path, std::size_t line) {
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  while (first < last && *first == ' ') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) {
    throw FormatError(path.string() + ":" + std::to_string(line) + ": not a number: '" + s + "'");
  }
  return v;
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

void write_matrix_csv(const std::filesystem::path& path, const Eigen::MatrixXd& m) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (c) out << ',';
      out << format_double(m(r, c));
    }
    out << '\n';
  }
}

Eigen::MatrixXd read_matrix_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<double> row;
    for (const auto& cell : split_commas(line)) row.push_back(parse_double(cell, path, lineno));
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": ragged row");
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw FormatError(path.string() + ": empty matrix");
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  return m;
}

void save_embeddings(const std::filesystem::path& path, const Eigen::MatrixXd& m, const std::string& model_id,
                     const std::string& split) {
  write_matrix_csv(path, m);
  const nlohmann::json side = {{"model_id", model_id}, {"split", split}, {"n", m.rows()}, {"d", m.cols()}};
  std::ofstream js(path.string() + ".json");
  js << side.dump(2) << '\n';
}

Embeddings load_embeddings(const std::filesystem::path& path) {
  Embeddings e;
  e.values = read_matrix_csv(path);
  e.info.n = static_cast<std::size_t>(e.values.rows());
  e.info.d = static_cast<std::size_t>(e.values.cols());
  e.info.model_id = path.stem().string();
  const std::filesystem::path side = path.string() + ".json";
  if (std::filesystem::exists(side)) {
    std::ifstream js(side);
    const auto j = nlohmann::json::parse(js);
    e.info.model_id = j.value("model_id", e.info.model_id);
    e.info.split = j.value("split", std::string{});
    if (j.at("n").get<std::size_t>() != e.info.n || j.at("d").get<std::size_t>() != e.info.d) {
      throw FormatError(path.string() + ": matrix shape disagrees with sidecar");
    }
  }
  return e;
}

void save_labels(const std::filesystem::path& path, const std::vector<int>& y_pub, const std::vector<int>& y_priv) {
  if (y_pub.size() != y_priv.size()) throw ShapeError("label columns differ in length");
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "y_pub,y_priv\n";
  for (std::size_t i = 0; i < y_pub.size(); ++i) out << y_pub[i] << ',' << y_priv[i] << '\n';
}

LabelColumns load_labels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  const auto header = split_commas(line);
  int pub_col = -1, priv_col = -1;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == "y_pub") pub_col = static_cast<int>(i);
    if (header[i] == "y_priv") priv_col = static_cast<int>(i);
  }
  if (priv_col < 0) throw FormatError(path.string() + ": no y_priv column");
  LabelColumns out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split_commas(line);
    if (cells.size() != header.size()) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": wrong arity");
    const auto bit = [&](int col) {
      const double v = parse_double(cells[static_cast<std::size_t>(col)], path, lineno);
      if (v != 0.0 && v != 1.0) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": label not 0/1");
      return static_cast<int>(v);
    };
    out.y_priv.push_back(bit(priv_col));
    if (pub_col >= 0) out.y_pub.push_back(bit(pub_col));
  }
  return out;
}

}  // namespace sublab
