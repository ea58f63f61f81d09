#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dreamclear/dit.hpp"
#include "dreamclear/nn.hpp"

namespace dreamclear {

/// Lower-cases, treats punctuation as whitespace and splits.
std::vector<std::string> tokenize_words(const std::string& text);

/// Learnable word-embedding table keyed by hashed whitespace tokens. Stands in
/// for a pretrained text encoder at toy scale; captions from any provider
/// enter the model through this path.
template <typename T>
class TextEmbedder {
public:
    static TextEmbedder create(ParamStore<T>& store, const std::string& prefix, int vocab_size, int dim, Rng& rng);
    static TextEmbedder bind(const ParamStore<T>& store, const std::string& prefix);

    std::vector<std::int64_t> token_ids(const std::string& text) const;
    /// One embedding row per word, truncated to max_tokens.
    TextTokens<T> embed(const std::string& text, int max_tokens) const;

    int dim() const { return static_cast<int>(table_->cols()); }
    int vocab_size() const { return static_cast<int>(table_->rows()); }

private:
    ag::Var<T> table_;
};

}  // namespace dreamclear
