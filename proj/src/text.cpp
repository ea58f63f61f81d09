#include "dreamclear/text.hpp"

#include <cctype>
#include <memory>

namespace dreamclear {

std::vector<std::string> tokenize_words(const std::string& text) {
    std::vector<std::string> words;
    std::string cur;
    for (const char ch : text) {
        const auto u = static_cast<unsigned char>(ch);
        if (std::isalnum(u) || ch == '-' || ch == '\'') {
            cur.push_back(static_cast<char>(std::tolower(u)));
        } else if (!cur.empty()) {
            words.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) words.push_back(std::move(cur));
    return words;
}

namespace {

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

template <typename T>
TextEmbedder<T> TextEmbedder<T>::create(ParamStore<T>& store, const std::string& prefix, int vocab_size, int dim,
                                        Rng& rng) {
    if (vocab_size <= 0 || dim <= 0) throw std::invalid_argument("text embedder sizes must be positive");
    store.add(prefix + ".table", init_matrix<T>(vocab_size, dim, Init::normal, rng, 1.0));
    return bind(store, prefix);
}

template <typename T>
TextEmbedder<T> TextEmbedder<T>::bind(const ParamStore<T>& store, const std::string& prefix) {
    TextEmbedder e;
    e.table_ = store.get(prefix + ".table");
    return e;
}

template <typename T>
std::vector<std::int64_t> TextEmbedder<T>::token_ids(const std::string& text) const {
    std::vector<std::int64_t> ids;
    for (const auto& w : tokenize_words(text)) {
        ids.push_back(static_cast<std::int64_t>(fnv1a(w) % static_cast<std::uint64_t>(vocab_size())));
    }
    return ids;
}

template <typename T>
TextTokens<T> TextEmbedder<T>::embed(const std::string& text, int max_tokens) const {
    auto ids = token_ids(text);
    if (static_cast<int>(ids.size()) > max_tokens) ids.resize(static_cast<std::size_t>(std::max(0, max_tokens)));
    const auto rows = static_cast<Eigen::Index>(ids.size());
    const int d = dim();
    auto index = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(rows) * d);
    for (Eigen::Index r = 0; r < rows; ++r) {
        for (int c = 0; c < d; ++c) (*index)[static_cast<std::size_t>(r * d + c)] = ids[static_cast<std::size_t>(r)] * d + c;
    }
    TextTokens<T> out;
    out.embeddings = ag::gather<T>(table_, rows, d, index);
    out.mask.assign(static_cast<std::size_t>(rows), 1);
    return out;
}

template class TextEmbedder<float>;
template class TextEmbedder<double>;

}  // namespace dreamclear
