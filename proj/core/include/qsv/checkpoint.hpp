#pragma once

#include <map>
#include <string>
#include <vector>

#include "qsv/autodiff.hpp"
#include "qsv/tensor.hpp"

namespace qsv {

/// Ordered registry of named trainable parameters. Names are unique and keep
/// a stable iteration order (lexicographic) so reductions and checkpoints are
/// reproducible.
class ParamStore {
public:
    ad::Value create(const std::string& name, Tensor init);
    ad::Value get(const std::string& name) const;
    bool contains(const std::string& name) const;

    std::vector<std::string> names() const;
    const std::map<std::string, ad::Value>& entries() const { return params_; }
    size_t total_elements() const;

    /// Parameters whose name starts with the given prefix.
    std::vector<ad::Value> with_prefix(const std::string& prefix) const;

private:
    std::map<std::string, ad::Value> params_;
};

/// QSCK checkpoint: magic "QSCK", u32 version, u32 count, then per array a
/// length-prefixed UTF-8 name, u8 rank, u32 dims, little-endian f64 payload.
/// Round-trips are bit-exact.
void save_checkpoint(const std::string& path, const ParamStore& store);

/// Loads into an existing store; every stored array must match a registered
/// parameter's name and shape.
void load_checkpoint(const std::string& path, ParamStore& store);

/// Loads a checkpoint as raw named tensors.
std::map<std::string, Tensor> read_checkpoint(const std::string& path);

}  // namespace qsv
