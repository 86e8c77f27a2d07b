// SPDX-License-Identifier: Apache-2.0
#include <filesystem>
#include <fstream>
#include <limits>

#include "doctest.h"
#include "sublab/errors.hpp"
#include "sublab/matrix_io.hpp"

using namespace sublab;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const char* name) {
  const fs::path p = fs::temp_directory_path() / "sublab_io_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

}  // namespace

TEST_CASE("doubles print shortest and round trip") {
  CHECK(format_double(0.1) == "0.1");
  CHECK(format_double(-2.0) == "-2");
  for (double v : {1.0 / 3.0, 1e-300, -123456.789, std::numeric_limits<double>::max()})
    CHECK(std::stod(format_double(v)) == v);
}

TEST_CASE("matrix CSV round trip is exact") {
  const fs::path dir = scratch_dir("matrix");
  Eigen::MatrixXd m(3, 2);
  m << 1.0 / 3.0, -0.0, 1e-17, 42, -7.25, 2.0 / 7.0;
  write_matrix_csv(dir / "m.csv", m);
  const Eigen::MatrixXd back = read_matrix_csv(dir / "m.csv");
  REQUIRE(back.rows() == 3);
  REQUIRE(back.cols() == 2);
  CHECK((back - m).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("ragged or non-numeric CSV is rejected") {
  const fs::path dir = scratch_dir("bad");
  write_text(dir / "ragged.csv", "1,2\n3\n");
  CHECK_THROWS_AS(read_matrix_csv(dir / "ragged.csv"), FormatError);
  write_text(dir / "text.csv", "1,x\n");
  CHECK_THROWS_AS(read_matrix_csv(dir / "text.csv"), FormatError);
  CHECK_THROWS_AS(read_matrix_csv(dir / "missing.csv"), FormatError);
}

TEST_CASE("embedding sidecars are validated") {
  const fs::path dir = scratch_dir("emb");
  Eigen::MatrixXd m = Eigen::MatrixXd::Random(4, 3);
  save_embeddings(dir / "e.csv", m, "teacher", "val");
  const Embeddings e = load_embeddings(dir / "e.csv");
  CHECK(e.info.model_id == "teacher");
  CHECK(e.info.split == "val");
  CHECK(e.info.n == 4);
  CHECK(e.info.d == 3);
  CHECK(e.values == m);
  write_text(dir / "e.csv.json", R"({"model_id":"teacher","split":"val","n":5,"d":3})");
  CHECK_THROWS_AS(load_embeddings(dir / "e.csv"), FormatError);
  fs::remove(dir / "e.csv.json");
  CHECK(load_embeddings(dir / "e.csv").info.n == 4);
}

TEST_CASE("label files in all accepted layouts") {
  const fs::path dir = scratch_dir("labels");
  save_labels(dir / "l.csv", {0, 1, 1}, {1, 0, 1});
  LabelColumns l = load_labels(dir / "l.csv");
  CHECK(l.y_pub == std::vector<int>{0, 1, 1});
  CHECK(l.y_priv == std::vector<int>{1, 0, 1});
  write_text(dir / "p.csv", "y_priv\n1\n0\n");
  l = load_labels(dir / "p.csv");
  CHECK(l.y_priv == std::vector<int>{1, 0});
  CHECK(l.y_pub.empty());
  write_text(dir / "c.csv", "a,b,c,y_pub,y_priv\n1,1,2,1,0\n3,4,5,0,1\n");
  l = load_labels(dir / "c.csv");
  CHECK(l.y_pub == std::vector<int>{1, 0});
  CHECK(l.y_priv == std::vector<int>{0, 1});
  write_text(dir / "bad.csv", "y_priv\n2\n");
  CHECK_THROWS_AS(load_labels(dir / "bad.csv"), FormatError);
  write_text(dir / "hdr.csv", "label\n1\n");
  CHECK_THROWS_AS(load_labels(dir / "hdr.csv"), FormatError);
}
