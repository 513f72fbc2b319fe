#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qsv/autodiff.hpp"
#include "qsv/checkpoint.hpp"
#include "qsv/rng.hpp"
#include "qsv/tensor.hpp"

namespace qsv {

/// Per-frame token-feature grid with timestamps: the pipeline's input.
struct FeatureVideo {
    Tensor features;  // [n_frames, n_tokens, dim]
    double fps = 1.0;
    std::vector<double> timestamps;  // seconds, strictly increasing
    std::string source_id;

    size_t n_frames() const { return features.shape()[0]; }
    size_t n_tokens() const { return features.shape()[1]; }
    size_t dim() const { return features.shape()[2]; }
};

struct Scene {
    size_t duration = 0;  // frames, >= 1
    size_t label = 0;     // index into the vocab's answer-label range
    uint64_t prototype_seed = 0;
};

/// Ground-truth recipe for one synthetic video.
struct SceneScript {
    std::vector<Scene> scenes;
    double noise_sigma = 0.1;
    size_t grid_rows = 4;
    size_t grid_cols = 4;  // rows*cols = n_tokens
    size_t dim = 32;
    double fps = 1.0;

    size_t total_frames() const;
};

struct SynthesizedVideo {
    FeatureVideo video;
    std::vector<size_t> boundaries;  // first frame of each scene; starts at 0
    std::vector<size_t> labels;      // one per scene, temporal order
};

/// Deterministic prototype grid for a given seed: entries ~ U(-1, 1).
Tensor scene_prototype(uint64_t prototype_seed, size_t n_tokens, size_t dim);

/// Generates frame features scene by scene. Each frame is its scene's
/// prototype plus (a) zero-sum per-token Gaussian texture noise of scale
/// sigma and (b) a token-shared Gaussian jitter confined to the trailing
/// quarter of feature dims (the "motion" half-space). The jitter is what
/// within-scene frame differences are made of, so momentum directions
/// separate scene changes from motion; see NOTES in README.
SynthesizedVideo synthesize(const SceneScript& script, Rng rng);

/// QSVF file: magic "QSVF", u32 version=1, u32 n_frames, u32 n_tokens,
/// u32 dim, f32 fps, then n_frames*n_tokens*dim little-endian f32 values.
void save_features(const std::string& path, const FeatureVideo& video);
FeatureVideo load_features(const std::string& path);

/// Ground-truth sidecar: JSON array of {"start_frame": int, "label": int}.
void save_sidecar(const std::string& path, const std::vector<size_t>& boundaries,
                  const std::vector<size_t>& labels);
bool load_sidecar(const std::string& path, std::vector<size_t>& boundaries,
                  std::vector<size_t>& labels);

/// Optional tiny per-token MLP standing in for a visual encoder.
struct EncoderConfig {
    size_t depth = 0;  // 0 = passthrough, else MLP layers (max 2)
    size_t width = 32;
};

/// Registers encoder parameters under "encoder.*". No-op for depth 0.
void init_encoder_params(const EncoderConfig& cfg, ParamStore& store,
                         Rng init_rng);

/// Applies the per-token MLP identically to every token; preserves shape
/// [n_frames*n_tokens, dim]. depth 0 returns the input unchanged.
ad::Value encode(const ad::Value& tokens, const EncoderConfig& cfg,
                 const ParamStore& store);

}  // namespace qsv
