use std::fs;
use std::io::{self, BufReader, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use docoap::cache::Cache;
use docoap::coap::TransmissionParams;
use docoap::dns::{DnsName, RecordType};
use docoap::doc::resolver::TtlPolicy;
use docoap::doc::{CachingScheme, DocClientConfig, DocMethod, PayloadFormat, ServeOptions, SyntheticResolver, ZoneResolver};
use docoap::live::{self, LiveError, QueryOptions};
use docoap::netsim::export::simulate_to_dir;
use docoap::netsim::{LinkModel, LinkProfile, Scenario, Transport};
use docoap::{sizes, trace};

#[derive(Parser)]
#[command(name = "docoap", version, about = "DNS over CoAP endpoints, simulator and analysis tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Security {
    None,
    Oscore,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Csv,
    Json,
}

#[derive(Args)]
struct SecurityArgs {
    #[arg(long, value_enum, default_value = "none")]
    security: Security,
    /// OSCORE key file (JSON); defaults to $DOCOAP_KEY_FILE.
    #[arg(long)]
    key_file: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a DoC server.
    Serve {
        #[arg(long, default_value = "127.0.0.1:5683")]
        bind: String,
        /// JSON zone file; without it every A/AAAA name resolves to synthetic addresses.
        #[arg(long)]
        zone: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        records: usize,
        #[arg(long, default_value_t = 300)]
        ttl: u32,
        #[arg(long, default_value = "eol-ttls")]
        scheme: CachingScheme,
        #[arg(long, default_value = "/dns")]
        path: String,
        /// Serve large responses block-wise with this block size.
        #[arg(long)]
        block_size: Option<usize>,
        #[command(flatten)]
        security: SecurityArgs,
    },
    /// Run a CoAP forward proxy.
    Proxy {
        #[arg(long, default_value = "127.0.0.1:5684")]
        bind: String,
        /// DoC server all requests are forwarded to.
        #[arg(long)]
        upstream: String,
        #[arg(long)]
        no_cache: bool,
        #[arg(long, default_value_t = 64)]
        cache_entries: usize,
    },
    /// Resolve one name and print the records.
    Query {
        name: String,
        #[arg(long = "type", default_value = "AAAA")]
        rtype: RecordType,
        /// DoC server address.
        #[arg(long, default_value = "127.0.0.1:5683")]
        server: String,
        /// Send through this forward proxy, naming the server in Proxy-Uri.
        #[arg(long)]
        proxy: Option<String>,
        #[arg(long, default_value = "fetch")]
        method: DocMethod,
        #[arg(long, default_value = "eol-ttls")]
        scheme: CachingScheme,
        #[arg(long, default_value = "wire")]
        format: PayloadFormat,
        #[arg(long)]
        block_size: Option<usize>,
        #[arg(long)]
        random_id: bool,
        /// Initial OSCORE sender sequence number; defaults to a clock-derived value.
        #[arg(long)]
        oscore_seq: Option<u64>,
        #[command(flatten)]
        security: SecurityArgs,
    },
    /// Per-layer packet sizes for each transport.
    Sizes {
        #[arg(long, default_value_t = 24)]
        name_len: usize,
        #[arg(long = "type", default_value = "AAAA")]
        rtype: RecordType,
        #[arg(long, default_value_t = 1)]
        records: usize,
        #[arg(long, value_delimiter = ',', default_value = "udp,dtls,coap,coaps,oscore")]
        transports: Vec<Transport>,
        #[arg(long, value_delimiter = ',', default_value = "fetch,get,post")]
        methods: Vec<DocMethod>,
        #[arg(long, value_delimiter = ',', default_value = "wire")]
        formats: Vec<PayloadFormat>,
        #[arg(long, default_value = "eol-ttls")]
        scheme: CachingScheme,
        #[arg(long, default_value = "ieee802154")]
        link_profile: LinkProfile,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario for several seeds and write CSV bundles.
    Simulate {
        scenario: PathBuf,
        /// Comma-separated seeds; defaults to the scenario's seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Run this many consecutive seeds starting at the scenario's seed.
        #[arg(long, conflicts_with = "seeds")]
        runs: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Name-length and record-type statistics of a query trace.
    AnalyzeTrace {
        path: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: OutputFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output(path: Option<&PathBuf>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    })
}

fn keys(args: &SecurityArgs) -> anyhow::Result<Option<docoap::oscore::KeyFile>> {
    if args.security == Security::None {
        return Ok(None);
    }
    match live::load_key_file(args.key_file.as_deref())? {
        Some(k) => Ok(Some(k)),
        None => bail!("OSCORE needs --key-file or ${}", live::KEY_FILE_ENV),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let params = TransmissionParams::default();
    match cli.command {
        Command::Serve { bind, zone, records, ttl, scheme, path, block_size, security } => {
            let keys = keys(&security)?;
            let opts = ServeOptions { scheme, path, block_size, ..Default::default() };
            match zone {
                Some(z) => {
                    let resolver = ZoneResolver::load(&z).with_context(|| format!("loading {}", z.display()))?;
                    live::serve(&bind, resolver, opts, params, keys.as_ref())?
                }
                None => {
                    let resolver = SyntheticResolver { records, policy: TtlPolicy::fixed(ttl), seed: 0 };
                    live::serve(&bind, resolver, opts, params, keys.as_ref())?
                }
            }
        }
        Command::Proxy { bind, upstream, no_cache, cache_entries } => {
            let cache = (!no_cache).then(|| Cache::new(cache_entries, docoap::cache::DEFAULT_GRACE));
            live::proxy(&bind, &upstream, cache, params)?
        }
        Command::Query { name, rtype, server, proxy, method, scheme, format, block_size, random_id, oscore_seq, security } => {
            let name: DnsName = name.parse().with_context(|| format!("invalid name {name:?}"))?;
            let oscore = match keys(&security)? {
                Some(k) => {
                    let mut ctx = k.client_context()?;
                    ctx.set_sender_seq(oscore_seq.unwrap_or_else(live::clock_sequence));
                    Some(ctx)
                }
                None => None,
            };
            let (target, proxy_uri) = match proxy {
                Some(p) => (p, Some(format!("coap://{server}"))),
                None => (server, None),
            };
            let config = DocClientConfig { method, scheme, format, proxy_uri, block_size, random_id, ..Default::default() };
            let msg = live::query(&name, rtype, QueryOptions { server: target, config, params, oscore })?;
            print!("{}", live::format_answer(&msg));
        }
        Command::Sizes { name_len, rtype, records, transports, methods, formats, scheme, link_profile, out } => {
            let req = sizes::SizeRequest {
                name_len,
                rtype,
                records,
                transports,
                methods,
                formats,
                scheme,
                link: LinkModel::profile(link_profile),
            };
            let rows = sizes::dissect(&req)?;
            sizes::write_csv(output(out.as_ref())?, &rows)?;
        }
        Command::Simulate { scenario, seeds, runs, out } => {
            let text = fs::read_to_string(&scenario).with_context(|| format!("reading {}", scenario.display()))?;
            let sc = Scenario::from_json(&text)?;
            let seeds = match (seeds.is_empty(), runs) {
                (_, Some(n)) => (0..n).map(|i| sc.seed + i).collect(),
                (true, None) => vec![sc.seed],
                (false, None) => seeds,
            };
            let results = simulate_to_dir(&sc, &seeds, &out)?;
            let mut stdout = io::stdout().lock();
            for m in &results {
                writeln!(
                    stdout,
                    "seed {}: {}/{} resolved, hop-1 {} B, hop-2 {} B, {} retransmissions",
                    m.seed,
                    m.resolved(),
                    m.queries.len(),
                    m.hop(1).bytes_sent,
                    m.hop(2).bytes_sent,
                    m.retransmissions.len()
                )?;
            }
            writeln!(stdout, "wrote {}", out.display())?;
        }
        Command::AnalyzeTrace { path, format, out } => {
            let file = fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
            let (entries, skipped) = trace::read_trace(BufReader::new(file))?;
            if skipped > 0 {
                eprintln!("warning: skipped {skipped} unparsable line(s)");
            }
            let Some(stats) = trace::analyze(&entries, skipped) else { bail!("no queries in {}", path.display()) };
            let mut w = output(out.as_ref())?;
            match format {
                OutputFormat::Csv => trace::write_csv(&mut w, &stats)?,
                OutputFormat::Json => {
                    serde_json::to_writer_pretty(&mut w, &stats)?;
                    writeln!(w)?;
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<LiveError>().map(LiveError::exit_code).unwrap_or(2);
            ExitCode::from(code as u8)
        }
    }
}
