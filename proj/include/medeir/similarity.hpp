#pragma once

#include <algorithm>
#include <cmath>
#include <exception>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace medeir {

using Embedding = std::vector<float>;
using Embedder = std::function<Embedding(const std::string&)>;

// Cosine similarity. For unit vectors this is the plain dot product.
inline double cosine(const std::vector<float>& a, const std::vector<float>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine: dimension mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw std::invalid_argument("cosine: zero vector");
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

// Embeds every text; with threads > 1 work is split into contiguous blocks
// so the result order (and values) match the serial run.
inline std::vector<Embedding> embed_texts(const std::vector<std::string>& texts, const Embedder& embed,
                                          unsigned threads = 1) {
  std::vector<Embedding> out(texts.size());
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(texts.size())));
  if (threads <= 1) {
    for (std::size_t i = 0; i < texts.size(); ++i) out[i] = embed(texts[i]);
    return out;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  const std::size_t block = (texts.size() + threads - 1) / threads;
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        const std::size_t end = std::min(texts.size(), (t + 1) * block);
        for (std::size_t i = t * block; i < end; ++i) out[i] = embed(texts[i]);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

}  // namespace medeir
