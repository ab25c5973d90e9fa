// SPDX-License-Identifier: Apache-2.0
//
// In-process message layer between clients and the server.
//
// Every message is a header (type u8, round u32, client u32) plus a body of
// checkpoint bytes or StyleStats records. Uplink messages can only be built
// from ModelParams or StyleStats, so nothing else can leave a client.
#pragma once

#include <cstddef>
#include <cstdint>
#include <mutex>
#include <span>
#include <vector>

#include "fedalign/mixstyle.hpp"
#include "fedalign/model.hpp"

namespace fedalign::transport {

enum class MessageType : std::uint8_t {
  BroadcastParams = 1,  // server -> client
  StyleBank = 2,        // server -> client
  UploadParams = 3,     // client -> server
  UploadStats = 4,      // client -> server
};

enum class Direction { Uplink, Downlink };

Direction direction_of(MessageType type);
const char* to_string(MessageType type);

struct Header {
  MessageType type = MessageType::UploadParams;
  std::uint32_t round = 0;
  std::uint32_t client = 0;
  bool operator==(const Header&) const = default;
};

inline constexpr std::size_t kHeaderSize = 1 + 4 + 4;

class Message {
 public:
  const Header& header() const { return header_; }
  std::span<const std::uint8_t> body() const { return body_; }
  Direction direction() const { return direction_of(header_.type); }
  // Header followed by body.
  std::vector<std::uint8_t> encode() const;
  static Message decode(std::span<const std::uint8_t> bytes);

 protected:
  Message(Header header, std::vector<std::uint8_t> body) : header_(header), body_(std::move(body)) {}

 private:
  Header header_;
  std::vector<std::uint8_t> body_;
};

class UplinkMessage : public Message {
 public:
  static UplinkMessage params(std::uint32_t round, std::uint32_t client, const model::ModelParams& params);
  static UplinkMessage stats(std::uint32_t round, std::uint32_t client,
                             std::span<const mixstyle::StyleStats> stats);

 private:
  using Message::Message;
};

class DownlinkMessage : public Message {
 public:
  static DownlinkMessage broadcast(std::uint32_t round, std::uint32_t client, const model::ModelParams& params);
  static DownlinkMessage bank(std::uint32_t round, std::uint32_t client,
                              std::span<const mixstyle::StyleStats> stats);

 private:
  using Message::Message;
};

model::ModelParams read_params(const Message& m);
std::vector<mixstyle::StyleStats> read_stats(const Message& m);

// Body bytes per direction.
struct ByteCounts {
  std::uint64_t uplink = 0;
  std::uint64_t downlink = 0;
  bool operator==(const ByteCounts&) const = default;
};

// Carries messages and records every header it sees. Safe to use from
// several client threads at once.
class Channel {
 public:
  // Returns the message as the receiving side sees it (re-decoded from bytes).
  Message send(const UplinkMessage& m);
  Message send(const DownlinkMessage& m);

  ByteCounts counts() const;
  std::vector<Header> log() const;

 private:
  Message carry(const Message& m);

  mutable std::mutex mu_;
  ByteCounts counts_;
  std::vector<Header> log_;
};

}  // namespace fedalign::transport
