#include <doctest.h>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <sstream>
#include <thread>

#include "medal/decoder.hpp"
#include "medal/error.hpp"
#include "medal/harness.hpp"
#include "medal/remote.hpp"

using namespace medal;

namespace {

// One-connection TCP server answering requests with `model`.
class LoopbackServer {
 public:
  explicit LoopbackServer(const Denoiser& model) : model_(model) {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = 0;
    REQUIRE(::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0);
    REQUIRE(::listen(listen_fd_, 1) == 0);
    socklen_t len = sizeof(addr);
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    thread_ = std::thread([this] { serve(); });
  }

  ~LoopbackServer() {
    thread_.join();
    ::close(listen_fd_);
  }

  std::string address() const { return "127.0.0.1:" + std::to_string(port_); }

 private:
  void serve() {
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) return;
    std::string buf;
    char chunk[4096];
    for (;;) {
      const ssize_t n = ::read(fd, chunk, sizeof(chunk));
      if (n <= 0) break;
      buf.append(chunk, static_cast<std::size_t>(n));
      for (std::size_t nl; (nl = buf.find('\n')) != std::string::npos;) {
        const std::string line = buf.substr(0, nl);
        buf.erase(0, nl + 1);
        const SeqState s = state_from_json(nlohmann::json::parse(line), model_.vocab());
        const std::string reply = encode_response(model_.predict(s)) + "\n";
        for (std::size_t off = 0; off < reply.size();) {
          const ssize_t w = ::write(fd, reply.data() + off, reply.size() - off);
          if (w <= 0) break;
          off += static_cast<std::size_t>(w);
        }
      }
    }
    ::close(fd);
  }

  const Denoiser& model_;
  int listen_fd_ = -1;
  int port_ = 0;
  std::thread thread_;
};

}  // namespace

TEST_CASE("response encoding round trips exactly") {
  DenoiserOutput out;
  out.logits[3] = {0.1, -2.5e-300, 1.0 / 3.0};
  out.logits[17] = {-1e12, 0.0, 6.02214076e23};
  CHECK(decode_response(encode_response(out)) == out);
}

TEST_CASE("malformed responses are protocol errors") {
  for (const char* bad : {"", "{", "{}", R"({"logits": {"x": [1]}})", R"({"logits": {"1a": [1]}})",
                          R"({"logits": {"1": ["a"]}})"}) {
    try {
      decode_response(bad);
      FAIL("expected a protocol error for " << bad);
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Protocol);
    }
  }
}

TEST_CASE("serve_denoiser answers each request line") {
  const TabularModel q = random_tabular(2, 3, 3);
  const SeqState root = SeqState::fully_masked({0}, 3, q.vocab());
  const SeqState one = apply_action(root, {2, 1});
  std::istringstream in(encode_request(root) + "\n\n" + encode_request(one) + "\n");
  std::ostringstream out;
  CHECK(serve_denoiser(q, in, out) == 2);
  std::istringstream replies(out.str());
  std::string line;
  REQUIRE(std::getline(replies, line));
  CHECK(decode_response(line) == q.predict(root));
  REQUIRE(std::getline(replies, line));
  CHECK(decode_response(line) == q.predict(one));

  std::istringstream junk("not json\n");
  try {
    serve_denoiser(q, junk, out);
    FAIL("expected a protocol error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Protocol);
  }
}

TEST_CASE("stream denoiser writes requests and reads replies") {
  const TabularModel q = random_tabular(5, 2, 3);
  const SeqState root = SeqState::fully_masked({}, 2, q.vocab());
  std::istringstream in(encode_response(q.predict(root)) + "\n");
  std::ostringstream out;
  StreamDenoiser remote(q.vocab(), in, out);
  CHECK(remote.predict(root) == q.predict(root));
  CHECK(out.str() == encode_request(root) + "\n");
  CHECK(remote.calls() == 1);
  try {
    remote.predict(root);
    FAIL("expected an io error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Io);
  }
}

TEST_CASE("remote decode over tcp matches the in-process model") {
  const TabularModel q = adversarial_instance(4);
  DecodeConfig cfg;
  cfg.length = 4;
  cfg.search.init_length = 1;
  Rng a(11);
  const auto local = decode(q, {0}, cfg, a);
  DecodeResult far;
  {
    LoopbackServer server(q);
    RemoteDenoiser remote(q.vocab(), server.address());
    Rng b(11);
    far = decode(remote, {0}, cfg, b);
    CHECK(remote.calls() > 0);
  }
  CHECK(far.final.generation() == local.final.generation());
  CHECK(far.candidate_gain == local.candidate_gain);
}

TEST_CASE("unreachable endpoints raise io errors") {
  const Vocab v = random_tabular(1, 2, 2).vocab();
  CHECK_THROWS_AS(RemoteDenoiser(v, "no-port"), Error);
  // Bind then close to get a port nobody listens on.
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  ::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr));
  socklen_t len = sizeof(addr);
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  ::close(fd);
  try {
    RemoteDenoiser r(v, "127.0.0.1:" + std::to_string(ntohs(addr.sin_port)));
    FAIL("expected an io error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Io);
  }
}
