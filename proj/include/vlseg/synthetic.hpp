#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vlseg/corpus.hpp"

namespace vlseg {

// Colored geometric shapes on a textured background; class 0 is background and
// class k (k >= 1) is the k-th shape kind. Lets every test run without benchmarks.
struct SyntheticSpec {
  int64_t num_labeled = 4;
  int64_t num_unlabeled = 16;
  int64_t num_val = 0;
  int64_t image_size = 96;
  int64_t shape_kinds = 2;  // up to 4: disc, square, triangle, ring
  int64_t min_shapes = 1;
  int64_t max_shapes = 3;
  std::uint64_t seed = 0;
};

std::vector<std::string> synthetic_class_names(int64_t shape_kinds);

SegSample make_synthetic_sample(const SyntheticSpec& spec, const std::string& id, Rng& rng);

// Writes images/, masks/, labeled.txt, unlabeled.txt, val.txt and classes.json under root.
SplitSpec generate_synthetic_corpus(const std::filesystem::path& root, const SyntheticSpec& spec);

}  // namespace vlseg
