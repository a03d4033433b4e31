#pragma once

#include "maskfuse/data.hpp"
#include "maskfuse/denoiser.hpp"
#include "maskfuse/transformer.hpp"

#include <filesystem>
#include <memory>
#include <string>

namespace testing {

using namespace maskfuse;

// Two text positions over {A=0, B=1}; image vocab unused.
struct AbToy {
    JointVocab vocab = build_vocab(2, 1);
    LayoutPtr layout = make_layout(ModalityLayout::blocks(0, 0, 2));
    std::shared_ptr<const ToyJointDistribution> dist =
        std::make_shared<ToyJointDistribution>(uniform_distribution(layout, {{0, 1}, {1, 0}}, vocab));
};

inline ModelSpec tiny_spec(const JointVocab & vocab, LayoutPtr layout, int d_model = 8, int layers = 2, int heads = 2) {
    ModelSpec s;
    s.n_layers = layers;
    s.n_heads  = heads;
    s.d_model  = d_model;
    s.vocab    = vocab;
    s.layout   = std::move(layout);
    return s;
}

inline std::filesystem::path temp_path(const std::string & name) {
    static int counter = 0;
    auto dir = std::filesystem::temp_directory_path() / "maskfuse_tests";
    std::filesystem::create_directories(dir);
    return dir / (std::to_string(::getpid()) + "_" + std::to_string(counter++) + "_" + name);
}

} // namespace testing

#include <unistd.h>
