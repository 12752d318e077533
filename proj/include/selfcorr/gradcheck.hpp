#pragma once

#include <map>
#include <string>
#include <vector>

#include "selfcorr/graph.hpp"
#include "selfcorr/tensor.hpp"

namespace selfcorr::ad {

struct GradCheckEntry {
    std::string param;
    std::size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_error = 0.0;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    bool pass = false;
    GradCheckEntry worst;
};

struct GradCheckOptions {
    double h = 1e-5;
    double tolerance = 1e-6;
    // Cap on the number of coordinates checked per call; coordinates are
    // subsampled deterministically when the graph has more.
    std::size_t max_coords = 10000;
    std::uint64_t subsample_seed = 0;
    int threads = 1;
};

// Compares analytic gradients of the scalar root against central finite
// differences over the named parameters. `params` must own the tensors the
// bindings point to; they are copied internally, never mutated.
GradCheckReport check_gradients(Graph& graph, NodeId root,
                                const std::map<std::string, Tensor>& params,
                                const std::map<std::string, Tensor>& inputs,
                                const GradCheckOptions& opt = {});

}  // namespace selfcorr::ad
