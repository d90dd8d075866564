#pragma once

#include <cctype>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace uimm {

// Frozen random embedding table standing in for a text encoder. Embeddings
// are fixed at construction from the seed; embed() is a pure function of the
// prompt string. Unknown words map to a dedicated out-of-vocabulary vector,
// and prompts shorter than m_tokens are padded with a dedicated pad vector.
template <class T>
struct TextEmbedderT {
    int d_t = 32;
    int m_tokens = 8;
    uint64_t seed = 0;
    std::vector<std::string> vocab;
    TensorT<T> table;  // [V, d_t]
    TensorT<T> oov;    // [d_t]
    TensorT<T> pad;    // [d_t]

    static std::vector<std::string> default_vocab() {
        return {
            "a",      "an",     "the",    "photo",  "of",      "on",     "with",   "in",
            "bright", "dark",   "solid",  "small",  "large",   "plain",  "shape",  "background",
            "red",    "green",  "blue",   "yellow", "purple",  "cyan",   "orange", "white",
            "magenta", "gray",  "black",  "pink",   "brown",   "teal",
            "circle", "square", "triangle", "ring", "cross",   "diamond", "stripe", "dot",
        };
    }

    TextEmbedderT() = default;

    TextEmbedderT(int d_t_, int m_tokens_, uint64_t seed_)
        : d_t(d_t_), m_tokens(m_tokens_), seed(seed_), vocab(default_vocab()) {
        if (d_t < 1 || m_tokens < 1) throw UsageError("text embedder: d_t and m_tokens must be >= 1");
        Rng rng(seed);
        table = TensorT<T>::zeros({static_cast<int>(vocab.size()), d_t});
        table.fill_normal(rng, T(0), T(1));
        oov = TensorT<T>::zeros({d_t});
        oov.fill_normal(rng, T(0), T(1));
        pad = TensorT<T>::zeros({d_t});
        pad.fill_normal(rng, T(0), T(1));
    }

    static std::vector<std::string> tokenize(const std::string& prompt) {
        std::vector<std::string> words;
        std::string cur;
        for (char ch : prompt) {
            if (std::isalpha(static_cast<unsigned char>(ch))) {
                cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
            } else if (!cur.empty()) {
                words.push_back(cur);
                cur.clear();
            }
        }
        if (!cur.empty()) words.push_back(cur);
        return words;
    }

    int vocab_index(const std::string& word) const {
        for (size_t i = 0; i < vocab.size(); ++i) {
            if (vocab[i] == word) return static_cast<int>(i);
        }
        return -1;
    }

    // Always returns [m_tokens, d_t]; extra words are truncated, missing ones
    // padded. The empty prompt is the all-padding (unconditional) embedding.
    TensorT<T> embed(const std::string& prompt) const {
        const std::vector<std::string> words = tokenize(prompt);
        TensorT<T> out = TensorT<T>::zeros({m_tokens, d_t});
        for (int i = 0; i < m_tokens; ++i) {
            const T* src;
            if (i < static_cast<int>(words.size())) {
                const int vi = vocab_index(words[static_cast<size_t>(i)]);
                src = vi >= 0 ? table.data() + static_cast<int64_t>(vi) * d_t : oov.data();
            } else {
                src = pad.data();
            }
            std::copy(src, src + d_t, out.data() + static_cast<int64_t>(i) * d_t);
        }
        return out;
    }

    TensorT<T> uncond_embedding() const { return embed(""); }
};

using TextEmbedder = TextEmbedderT<float>;

}  // namespace uimm
