// SPDX-License-Identifier: Apache-2.0
#include "fedalign/transport.hpp"

#include "fedalign/bytes.hpp"
#include "fedalign/errors.hpp"

namespace fedalign::transport {

Direction direction_of(MessageType type) {
  switch (type) {
    case MessageType::BroadcastParams:
    case MessageType::StyleBank:
      return Direction::Downlink;
    case MessageType::UploadParams:
    case MessageType::UploadStats:
      return Direction::Uplink;
  }
  throw ContractViolation("unknown message type");
}

const char* to_string(MessageType type) {
  switch (type) {
    case MessageType::BroadcastParams: return "broadcast_params";
    case MessageType::StyleBank: return "style_bank";
    case MessageType::UploadParams: return "upload_params";
    case MessageType::UploadStats: return "upload_stats";
  }
  return "unknown";
}

namespace {

std::vector<std::uint8_t> stats_body(std::span<const mixstyle::StyleStats> stats) {
  std::vector<std::uint8_t> out;
  for (const auto& s : stats) mixstyle::encode_stats_record(s, out);
  return out;
}

}  // namespace

std::vector<std::uint8_t> Message::encode() const {
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderSize + body_.size());
  ByteWriter w(out);
  w.u8(static_cast<std::uint8_t>(header_.type));
  w.u32(header_.round);
  w.u32(header_.client);
  out.insert(out.end(), body_.begin(), body_.end());
  return out;
}

Message Message::decode(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  Header h;
  const std::uint8_t type = r.u8();
  if (type < 1 || type > 4) throw FormatError(0, "unknown message type " + std::to_string(type));
  h.type = static_cast<MessageType>(type);
  h.round = r.u32();
  h.client = r.u32();
  const auto rest = bytes.subspan(kHeaderSize);
  return Message(h, {rest.begin(), rest.end()});
}

UplinkMessage UplinkMessage::params(std::uint32_t round, std::uint32_t client, const model::ModelParams& params) {
  return UplinkMessage({MessageType::UploadParams, round, client}, model::serialize_checkpoint(params));
}

UplinkMessage UplinkMessage::stats(std::uint32_t round, std::uint32_t client,
                                   std::span<const mixstyle::StyleStats> stats) {
  for (const auto& s : stats)
    if (s.client_id != client) throw ContractViolation("uplink stats must carry the sender's client id");
  return UplinkMessage({MessageType::UploadStats, round, client}, stats_body(stats));
}

DownlinkMessage DownlinkMessage::broadcast(std::uint32_t round, std::uint32_t client,
                                           const model::ModelParams& params) {
  return DownlinkMessage({MessageType::BroadcastParams, round, client}, model::serialize_checkpoint(params));
}

DownlinkMessage DownlinkMessage::bank(std::uint32_t round, std::uint32_t client,
                                      std::span<const mixstyle::StyleStats> stats) {
  return DownlinkMessage({MessageType::StyleBank, round, client}, stats_body(stats));
}

model::ModelParams read_params(const Message& m) {
  const auto t = m.header().type;
  if (t != MessageType::BroadcastParams && t != MessageType::UploadParams)
    throw ContractViolation(std::string("read_params on a ") + to_string(t) + " message");
  return model::deserialize_checkpoint(m.body());
}

std::vector<mixstyle::StyleStats> read_stats(const Message& m) {
  const auto t = m.header().type;
  if (t != MessageType::StyleBank && t != MessageType::UploadStats)
    throw ContractViolation(std::string("read_stats on a ") + to_string(t) + " message");
  return mixstyle::decode_stats_records(m.body());
}

Message Channel::send(const UplinkMessage& m) { return carry(m); }
Message Channel::send(const DownlinkMessage& m) { return carry(m); }

Message Channel::carry(const Message& m) {
  const auto wire = m.encode();
  {
    std::lock_guard lock(mu_);
    (m.direction() == Direction::Uplink ? counts_.uplink : counts_.downlink) += m.body().size();
    log_.push_back(m.header());
  }
  return Message::decode(wire);
}

ByteCounts Channel::counts() const {
  std::lock_guard lock(mu_);
  return counts_;
}

std::vector<Header> Channel::log() const {
  std::lock_guard lock(mu_);
  return log_;
}

}  // namespace fedalign::transport
