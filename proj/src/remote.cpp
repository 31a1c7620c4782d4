#include "medal/remote.hpp"

#include <netdb.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <istream>
#include <ostream>
#include <streambuf>

#include "medal/error.hpp"

namespace medal {

std::string encode_request(const SeqState& state) { return to_json(state).dump(); }

std::string encode_response(const DenoiserOutput& output) {
  nlohmann::json logits = nlohmann::json::object();
  for (const auto& [pos, row] : output.logits) logits[std::to_string(pos)] = row;
  return nlohmann::json{{"logits", logits}}.dump();
}

DenoiserOutput decode_response(const std::string& line) {
  DenoiserOutput out;
  try {
    const auto j = nlohmann::json::parse(line);
    for (const auto& [key, row] : j.at("logits").items()) {
      std::size_t consumed = 0;
      const auto pos = std::stoull(key, &consumed);
      if (consumed != key.size()) throw Error(ErrorKind::Protocol, "bad position key '" + key + "'");
      out.logits.emplace(static_cast<std::size_t>(pos), row.get<std::vector<double>>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Protocol, std::string("malformed response: ") + e.what());
  } catch (const std::logic_error& e) {
    throw Error(ErrorKind::Protocol, std::string("malformed response: ") + e.what());
  }
  return out;
}

std::size_t serve_denoiser(const Denoiser& model, std::istream& in, std::ostream& out) {
  std::size_t served = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    SeqState state;
    try {
      state = state_from_json(nlohmann::json::parse(line), model.vocab());
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Protocol, std::string("malformed request: ") + e.what());
    }
    out << encode_response(model.predict(state)) << '\n' << std::flush;
    ++served;
  }
  return served;
}

StreamDenoiser::StreamDenoiser(Vocab vocab, std::istream& in, std::ostream& out)
    : vocab_(vocab), in_(in), out_(out) {}

DenoiserOutput StreamDenoiser::do_predict(const SeqState& state) const {
  std::lock_guard lock(mutex_);
  out_ << encode_request(state) << '\n' << std::flush;
  if (!out_) throw Error(ErrorKind::Io, "remote denoiser: write failed");
  std::string line;
  if (!std::getline(in_, line)) throw Error(ErrorKind::Io, "remote denoiser: connection closed");
  return decode_response(line);
}

namespace {

class FdStreamBuf : public std::streambuf {
 public:
  explicit FdStreamBuf(int fd) : fd_(fd) {
    setg(in_, in_, in_);
    setp(out_, out_ + sizeof(out_));
  }

 protected:
  int_type underflow() override {
    ssize_t n;
    do {
      n = ::read(fd_, in_, sizeof(in_));
    } while (n < 0 && errno == EINTR);
    if (n <= 0) return traits_type::eof();
    setg(in_, in_, in_ + n);
    return traits_type::to_int_type(in_[0]);
  }

  int_type overflow(int_type ch) override {
    if (flush_out() < 0) return traits_type::eof();
    if (!traits_type::eq_int_type(ch, traits_type::eof())) {
      *pptr() = traits_type::to_char_type(ch);
      pbump(1);
    }
    return traits_type::not_eof(ch);
  }

  int sync() override { return flush_out(); }

 private:
  int flush_out() {
    const char* p = pbase();
    while (p < pptr()) {
      const ssize_t n = ::write(fd_, p, static_cast<std::size_t>(pptr() - p));
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) return -1;
      p += n;
    }
    setp(out_, out_ + sizeof(out_));
    return 0;
  }

  int fd_;
  char in_[1 << 14];
  char out_[1 << 14];
};

int connect_tcp(const std::string& address) {
  const auto colon = address.rfind(':');
  if (colon == std::string::npos) throw Error(ErrorKind::InvalidArgument, "remote address must be host:port");
  const std::string host = address.substr(0, colon);
  const std::string port = address.substr(colon + 1);
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (const int rc = ::getaddrinfo(host.c_str(), port.c_str(), &hints, &res); rc != 0) {
    throw Error(ErrorKind::Io, "resolve " + address + ": " + ::gai_strerror(rc));
  }
  int fd = -1;
  for (addrinfo* ai = res; ai; ai = ai->ai_next) {
    fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(res);
  if (fd < 0) throw Error(ErrorKind::Io, "cannot connect to " + address);
  return fd;
}

}  // namespace

struct RemoteDenoiser::Connection {
  int fd;
  FdStreamBuf buf;
  std::istream in;
  std::ostream out;
  StreamDenoiser client;

  Connection(const Vocab& vocab, int fd_) : fd(fd_), buf(fd_), in(&buf), out(&buf), client(vocab, in, out) {}
  ~Connection() { ::close(fd); }
};

RemoteDenoiser::RemoteDenoiser(Vocab vocab, const std::string& address)
    : vocab_(vocab), conn_(std::make_unique<Connection>(vocab_, connect_tcp(address))) {}

RemoteDenoiser::~RemoteDenoiser() = default;

DenoiserOutput RemoteDenoiser::do_predict(const SeqState& state) const { return conn_->client.predict(state); }

}  // namespace medal
