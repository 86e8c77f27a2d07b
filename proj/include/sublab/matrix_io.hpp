// SPDX-License-Identifier: Apache-2.0
#pragma once

// Plain CSV matrices with JSON sidecars, the exchange format for embedding
// dumps, teacher logits and label files.

#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace sublab {

/// Shortest representation that parses back to the same double.
std::string format_double(double v);

void write_matrix_csv(const std::filesystem::path& path, const Eigen::MatrixXd& m);
Eigen::MatrixXd read_matrix_csv(const std::filesystem::path& path);

struct EmbeddingInfo {
  std::string model_id;
  std::string split;
  std::size_t n = 0;
  std::size_t d = 0;
};

struct Embeddings {
  Eigen::MatrixXd values;
  EmbeddingInfo info;
};

/// Matrix CSV plus `<path>.json` {model_id, split, n, d}.
void save_embeddings(const std::filesystem::path& path, const Eigen::MatrixXd& m, const std::string& model_id,
                     const std::string& split);
/// Reads the CSV and validates it against the sidecar when one exists.
Embeddings load_embeddings(const std::filesystem::path& path);

struct LabelColumns {
  std::vector<int> y_pub;
  std::vector<int> y_priv;
};

/// Header `y_pub,y_priv`, one row per example.
void save_labels(const std::filesystem::path& path, const std::vector<int>& y_pub, const std::vector<int>& y_priv);
/// Accepts headers `y_pub,y_priv`, `y_priv`, or `a,b,c,y_pub,y_priv`.
LabelColumns load_labels(const std::filesystem::path& path);

}  // namespace sublab
