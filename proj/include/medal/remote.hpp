#pragma once

#include <iosfwd>
#include <memory>
#include <mutex>
#include <string>

#include "medal/denoiser.hpp"

namespace medal {

// Line-delimited JSON protocol for an out-of-process denoiser.
//   request:  one state-file object per line
//   response: {"logits": {"<position>": [float, ...], ...}} per line
std::string encode_request(const SeqState& state);
DenoiserOutput decode_response(const std::string& line);
std::string encode_response(const DenoiserOutput& output);

/// Answers requests read from `in` with `model` until EOF. Returns the
/// number of requests served.
std::size_t serve_denoiser(const Denoiser& model, std::istream& in, std::ostream& out);

/// Client side over an arbitrary stream pair. Calls are serialized.
class StreamDenoiser : public Denoiser {
 public:
  StreamDenoiser(Vocab vocab, std::istream& in, std::ostream& out);

  const Vocab& vocab() const override { return vocab_; }
  bool concurrent_safe() const override { return false; }

 protected:
  DenoiserOutput do_predict(const SeqState& state) const override;

 private:
  Vocab vocab_;
  std::istream& in_;
  std::ostream& out_;
  mutable std::mutex mutex_;
};

/// StreamDenoiser over a TCP connection to "host:port".
class RemoteDenoiser final : public Denoiser {
 public:
  RemoteDenoiser(Vocab vocab, const std::string& address);
  ~RemoteDenoiser() override;

  const Vocab& vocab() const override { return vocab_; }
  bool concurrent_safe() const override { return false; }

 protected:
  DenoiserOutput do_predict(const SeqState& state) const override;

 private:
  struct Connection;
  Vocab vocab_;
  std::unique_ptr<Connection> conn_;
};

}  // namespace medal
