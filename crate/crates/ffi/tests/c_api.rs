use std::ffi::{CStr, CString};
use std::ptr;

use docoap::dns::{DnsMessage, RecordType};
use docoap_ffi::*;

const AAAA: u16 = 28;

fn last_error() -> String {
    let mut buf = [0 as std::ffi::c_char; 256];
    let n = unsafe { docoap_last_error(buf.as_mut_ptr(), buf.len()) };
    let s = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned();
    assert_eq!(s.len(), n.min(255));
    s
}

unsafe fn context(sender: &[u8], recipient: &[u8], secret: &[u8]) -> *mut DocoapOscoreContext {
    let salt = b"salt";
    let ctx = docoap_oscore_context_new(
        secret.as_ptr(),
        secret.len(),
        salt.as_ptr(),
        salt.len(),
        sender.as_ptr(),
        sender.len(),
        recipient.as_ptr(),
        recipient.len(),
    );
    assert!(!ctx.is_null(), "{}", last_error());
    ctx
}

/// Moves datagrams between client and server until the client reports a
/// result; returns the outcome and the response bytes.
unsafe fn exchange(client: *mut DocoapClient, server: *mut DocoapServer, name: &str, now: u64) -> (DocoapOutcome, Vec<u8>) {
    let name = CString::new(name).unwrap();
    let mut qid = 0;
    assert_eq!(docoap_client_query(client, name.as_ptr(), AAAA, now, &mut qid), DocoapStatus::Ok);
    let mut buf = vec![0u8; 2048];
    let mut n = 0;
    for _ in 0..50 {
        while docoap_client_poll_transmit(client, buf.as_mut_ptr(), buf.len(), &mut n) == DocoapStatus::Ok {
            assert_eq!(docoap_server_handle_datagram(server, 7, buf.as_ptr(), n, now), DocoapStatus::Ok);
        }
        let mut peer = 0;
        while docoap_server_poll_transmit(server, &mut peer, buf.as_mut_ptr(), buf.len(), &mut n) == DocoapStatus::Ok {
            assert_eq!(peer, 7);
            assert_eq!(docoap_client_handle_datagram(client, buf.as_ptr(), n, now), DocoapStatus::Ok);
        }
        let mut id = 0;
        let mut outcome = DocoapOutcome::Failed;
        match docoap_client_poll_result(client, &mut id, &mut outcome, buf.as_mut_ptr(), buf.len(), &mut n) {
            DocoapStatus::Ok => {
                assert_eq!(id, qid);
                return (outcome, buf[..n].to_vec());
            }
            DocoapStatus::Empty => {}
            other => panic!("poll_result: {other:?}"),
        }
    }
    panic!("no result");
}

#[test]
fn client_server_round_trip() {
    for format in [DocoapFormat::Wire, DocoapFormat::Cbor] {
        for method in [DocoapMethod::Fetch, DocoapMethod::Get, DocoapMethod::Post] {
            unsafe {
                let client = docoap_client_new(method, format, DocoapScheme::EolTtls, 1, ptr::null_mut());
                let server = docoap_server_new(2, 300, DocoapScheme::EolTtls, 1, ptr::null_mut());
                assert!(!client.is_null() && !server.is_null());
                let (outcome, bytes) = exchange(client, server, "example.org", 0);
                assert_eq!(outcome, DocoapOutcome::Resolved, "{method:?} {format:?}: {}", last_error());
                let msg = DnsMessage::decode(&bytes).unwrap();
                assert_eq!(msg.answers.len(), 2);
                assert!(msg.answers.iter().all(|r| r.rtype == RecordType::AAAA && r.ttl == 300));
                docoap_client_free(client);
                docoap_server_free(server);
            }
        }
    }
}

#[test]
fn oscore_round_trip_and_wrong_key() {
    unsafe {
        let client = docoap_client_new(
            DocoapMethod::Fetch,
            DocoapFormat::Wire,
            DocoapScheme::EolTtls,
            2,
            context(&[1], &[], b"shared secret"),
        );
        let server =
            docoap_server_new(1, 60, DocoapScheme::EolTtls, 2, context(&[], &[1], b"shared secret"));
        let (outcome, bytes) = exchange(client, server, "secure.example", 0);
        assert_eq!(outcome, DocoapOutcome::Resolved, "{}", last_error());
        assert_eq!(DnsMessage::decode(&bytes).unwrap().answers.len(), 1);
        docoap_client_free(client);
        docoap_server_free(server);

        let client = docoap_client_new(
            DocoapMethod::Fetch,
            DocoapFormat::Wire,
            DocoapScheme::EolTtls,
            3,
            context(&[1], &[], b"wrong secret"),
        );
        let server =
            docoap_server_new(1, 60, DocoapScheme::EolTtls, 3, context(&[], &[1], b"shared secret"));
        let (outcome, bytes) = exchange(client, server, "secure.example", 0);
        assert_eq!(outcome, DocoapOutcome::Failed);
        assert!(bytes.is_empty());
        assert!(!last_error().is_empty());
        docoap_client_free(client);
        docoap_server_free(server);
    }
}

#[test]
fn retransmission_is_identical() {
    unsafe {
        let client = docoap_client_new(DocoapMethod::Fetch, DocoapFormat::Wire, DocoapScheme::EolTtls, 4, ptr::null_mut());
        let name = CString::new("lost.example").unwrap();
        let mut id = 0;
        assert_eq!(docoap_client_query(client, name.as_ptr(), AAAA, 0, &mut id), DocoapStatus::Ok);
        let mut first = [0u8; 256];
        let mut n1 = 0;
        assert_eq!(docoap_client_poll_transmit(client, first.as_mut_ptr(), first.len(), &mut n1), DocoapStatus::Ok);
        let mut deadline = 0;
        assert_eq!(docoap_client_poll_timeout(client, &mut deadline), DocoapStatus::Ok);
        assert!((2000..=3000).contains(&deadline), "{deadline}");
        assert_eq!(docoap_client_handle_timeout(client, deadline), DocoapStatus::Ok);
        let mut second = [0u8; 256];
        let mut n2 = 0;
        assert_eq!(docoap_client_poll_transmit(client, second.as_mut_ptr(), second.len(), &mut n2), DocoapStatus::Ok);
        assert_eq!(first[..n1], second[..n2]);
        docoap_client_free(client);
    }
}

#[test]
fn buffer_too_small_reports_length() {
    let name = CString::new("0123456789.abcdefghij.de").unwrap();
    let mut small = [0u8; 10];
    let mut written = 0;
    let status = unsafe { docoap_dns_encode_query(name.as_ptr(), AAAA, small.as_mut_ptr(), small.len(), &mut written) };
    assert_eq!(status, DocoapStatus::BufferTooSmall);
    assert_eq!(written, 42);
    assert!(last_error().contains("42"));
    assert_eq!(small, [0; 10]);

    let mut buf = [0u8; 64];
    let status = unsafe { docoap_dns_encode_query(name.as_ptr(), AAAA, buf.as_mut_ptr(), buf.len(), &mut written) };
    assert_eq!(status, DocoapStatus::Ok);
    let msg = DnsMessage::decode(&buf[..written]).unwrap();
    assert_eq!(msg.id, 0);
}

#[test]
fn argument_errors() {
    let mut written = 0;
    let mut buf = [0u8; 64];
    unsafe {
        assert_eq!(docoap_dns_encode_query(ptr::null(), AAAA, buf.as_mut_ptr(), 64, &mut written), DocoapStatus::NullPointer);
        assert_eq!(last_error(), "name is NULL");
        let bad = CString::new("a..b").unwrap();
        assert_eq!(docoap_dns_encode_query(bad.as_ptr(), AAAA, buf.as_mut_ptr(), 64, &mut written), DocoapStatus::InvalidArgument);
        assert!(last_error().contains("a..b"));
        let junk = [0xffu8; 5];
        assert_eq!(
            docoap_cbor_compress_response(junk.as_ptr(), junk.len(), buf.as_mut_ptr(), 64, &mut written),
            DocoapStatus::Decode
        );
        assert_eq!(docoap_client_poll_transmit(ptr::null_mut(), buf.as_mut_ptr(), 64, &mut written), DocoapStatus::NullPointer);
        let mut frames = 0;
        assert_eq!(docoap_fragment_count(100_000, DocoapLinkProfile::Ieee802154, &mut frames), DocoapStatus::InvalidArgument);
        assert_eq!(docoap_fragment_count(0, DocoapLinkProfile::Ieee802154, ptr::null_mut()), DocoapStatus::NullPointer);
        docoap_client_free(ptr::null_mut());
        docoap_server_free(ptr::null_mut());
        docoap_oscore_context_free(ptr::null_mut());
    }
}

#[test]
fn fragments_and_compression() {
    let mut frames = 0;
    unsafe {
        assert_eq!(docoap_fragment_count(175, DocoapLinkProfile::Ieee802154, &mut frames), DocoapStatus::Ok);
        assert_eq!(frames, 3);
        assert_eq!(docoap_fragment_count(58, DocoapLinkProfile::Ieee802154, &mut frames), DocoapStatus::Ok);
        assert_eq!(frames, 1);
        assert_eq!(docoap_fragment_count(58, DocoapLinkProfile::Lorawan, &mut frames), DocoapStatus::Ok);
        assert_eq!(frames, 2);

        let client = docoap_client_new(DocoapMethod::Fetch, DocoapFormat::Wire, DocoapScheme::EolTtls, 5, ptr::null_mut());
        let server = docoap_server_new(1, 300, DocoapScheme::EolTtls, 5, ptr::null_mut());
        let (_, wire) = exchange(client, server, "0123456789.abcdefghij.de", 0);
        assert_eq!(wire.len(), 70);
        let mut out = [0u8; 64];
        let mut n = 0;
        assert_eq!(docoap_cbor_compress_response(wire.as_ptr(), wire.len(), out.as_mut_ptr(), out.len(), &mut n), DocoapStatus::Ok);
        assert!(n < wire.len() && n <= 24, "{n}");
        docoap_client_free(client);
        docoap_server_free(server);
        assert!(!CStr::from_ptr(docoap_version()).to_bytes().is_empty());
    }
}
