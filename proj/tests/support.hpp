#pragma once

#include "trapnet/dataset.hpp"
#include "trapnet/trapdoor.hpp"

#include <atomic>
#include <filesystem>
#include <random>
#include <string>

namespace test_support {

/// Small, well separated synthetic set shared by the fast tests.
inline trapnet::Dataset blobs(int classes = 3, trapnet::Index dim = 16, trapnet::Index per_class = 40) {
  return trapnet::synth_blobs(classes, dim, per_class, 7);
}

/// Scratch directory removed on scope exit.
struct TempDir {
  std::filesystem::path path;

  TempDir() {
    static std::atomic<int> counter{0};
    std::random_device rd;
    path = std::filesystem::temp_directory_path() /
           ("trapnet-test-" + std::to_string(rd()) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

/// Three blob classes with a trapdoor on label 0: the last four inputs
/// pushed to 1. Even rows train the MLP, odd rows are held out.
struct BlobTrapdoor {
  trapnet::Dataset train, held;
  trapnet::TrapdoorRegistry registry;
  trapnet::Model model;
};

inline const BlobTrapdoor& blob_trapdoor() {
  using namespace trapnet;
  static const BlobTrapdoor fixture = [] {
    const Dataset all = synth_blobs(3, 16, 400, 7);
    std::vector<Index> even, odd;
    for (Index i = 0; i < all.size(); ++i) (i % 2 ? odd : even).push_back(i);
    Trapdoor t;
    t.kappa = 1.f;
    t.target_label = 0;
    t.mask = Tensor({16}, 0.f);
    t.pattern = Tensor({16}, 0.f);
    for (Index i = 12; i < 16; ++i) t.mask[i] = t.pattern[i] = 1.f;
    TrapdoorRegistry reg;
    reg.add(TrapdoorSet{{t}});
    TrapdoorTrainingConfig cfg;
    cfg.train.epochs = 15;
    cfg.train.optimizer.lr = 1e-2;
    cfg.train.seed = 3;
    auto [model, log] = train_trapdoored(build_mlp(16, {32}, 3, 2), all.subset(even), reg, cfg);
    return BlobTrapdoor{all.subset(even), all.subset(odd), reg, std::move(model)};
  }();
  return fixture;
}

}  // namespace test_support
