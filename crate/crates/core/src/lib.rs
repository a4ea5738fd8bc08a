//! DNS over CoAP.

pub mod cache;
pub mod cbor;
pub mod cbor_dns;
pub mod coap;
pub mod dns;
pub mod live;
pub mod doc;
pub mod netsim;
pub mod oscore;
pub mod sizes;
pub mod trace;
