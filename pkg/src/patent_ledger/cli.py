"""Command-line driver.

Two styles of use: one-shot commands (`run`, `audit`, `replay`, `consensus
run`, `token matrix`) and workspace commands. A workspace is a directory
holding a scenario script; each mutating subcommand appends a step and
deterministically re-runs the whole script, so the ledger state is always
reproducible from the script alone.
"""

from __future__ import annotations

import json
import os
import sys
from importlib import resources

import click

from .consensus import Behavior, run_byzantine_experiment
from .errors import LedgerError, ScriptError
from .ledger import load_chain, replay_chain
from .poe import verify_existence
from .scenario import ScenarioRunner, load_script, parse_script
from .tokens import FEATURE_NAMES, conformance_matrix

MATRIX_HEADERS = ("Support FTs", "Support NFTs", "Support batch transferring",
                  "Support operator", "Fractionalized NFTs")


def render_matrix() -> str:
    rows = [("NFT standards",) + MATRIX_HEADERS]
    for name, features in conformance_matrix().items():
        rows.append((name,) + tuple(
            "Yes" if features[feature] else "No" for feature in FEATURE_NAMES))
    widths = [max(len(row[col]) for row in rows) for col in range(len(rows[0]))]
    return "\n".join(
        "  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip()
        for row in rows)


def _resolve_script(script: str) -> str:
    if os.path.exists(script):
        with open(script, "r", encoding="utf-8") as fh:
            return fh.read()
    name = script if script.endswith(".txt") else script + ".txt"
    bundle = resources.files("patent_ledger") / "scenarios" / name
    if bundle.is_file():
        return bundle.read_text(encoding="utf-8")
    raise click.ClickException(f"no script at {script!r} and no bundled scenario"
                               f" named {name!r}")


@click.group()
def main() -> None:
    """Simulated permissioned patent ledger."""


@main.command()
@click.argument("script")
@click.option("--seed", type=int, default=None, help="Override the script's seed.")
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Write report.json and ledger.dump into this directory.")
def run(script: str, seed: int | None, out_dir: str | None) -> None:
    """Run a scenario script; exit 0 iff no invariant violations."""
    parsed = parse_script(_resolve_script(script))
    if seed is not None:
        parsed.seed = seed
    try:
        runner = ScenarioRunner(parsed)
        report = runner.run()
    except ScriptError as err:
        raise click.ClickException(str(err))
    click.echo(report.to_json())
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
        with open(os.path.join(out_dir, "ledger.dump"), "w", encoding="utf-8") as fh:
            fh.write(runner.chain_dump())
    sys.exit(0 if report.ok else 1)


@main.command()
@click.argument("dump", type=click.Path(exists=True))
def audit(dump: str) -> None:
    """Recompute every hash, signature, and quorum in a ledger dump."""
    from .scenario import audit_chain
    try:
        report = audit_chain(dump)
    except LedgerError as err:
        raise click.ClickException(f"corrupt dump: {err}")
    click.echo(report.render())
    sys.exit(0 if report.ok else 1)


@main.command()
@click.argument("dump", type=click.Path(exists=True))
@click.option("--expect", default=None, help="Fail unless the replayed state hash matches.")
def replay(dump: str, expect: str | None) -> None:
    """Replay a dump from genesis and print the resulting state hash."""
    try:
        with open(dump, "r", encoding="utf-8") as fh:
            blocks = load_chain(fh.read())
        state, report = replay_chain(blocks)
    except LedgerError as err:
        raise click.ClickException(str(err))
    if not report.ok:
        click.echo(report.render())
        sys.exit(1)
    digest = state.state_digest().hex()
    click.echo(digest)
    if expect is not None and digest != expect:
        raise click.ClickException("state hash mismatch")


@main.group()
def consensus() -> None:
    """Seeded byzantine experiments."""


@consensus.command("run")
@click.option("--validators", "n", type=int, required=True)
@click.option("--byzantine", "f", type=int, default=0)
@click.option("--seed", type=int, default=0)
@click.option("--rounds", type=int, default=10)
@click.option("--behavior", type=click.Choice(["abstain", "equivocate"]),
              default="equivocate")
def consensus_run(n: int, f: int, seed: int, rounds: int, behavior: str) -> None:
    """Run one seeded schedule and report commits and conflicts."""
    result = run_byzantine_experiment(
        n, f, seed, rounds=rounds,
        behavior=Behavior.ABSTAIN if behavior == "abstain" else Behavior.EQUIVOCATE)
    click.echo(json.dumps({
        "validators": result.n,
        "byzantine": result.byzantine,
        "seed": result.seed,
        "admission_height": result.admission_height,
        "final_height": result.final_height,
        "blocks_after_admission": result.blocks_after_admission,
        "conflicts": result.conflicts,
        "forged_commits_rejected": result.forged_commits_rejected,
    }, indent=2))
    sys.exit(1 if result.conflicts else 0)


# ---------------------------------------------------------------------------
# workspace plumbing

def _ws_script_path(ws: str) -> str:
    return os.path.join(ws, "scenario.txt")


def _ws_load(ws: str) -> ScenarioRunner:
    path = _ws_script_path(ws)
    if not os.path.exists(path):
        raise click.ClickException(f"{ws} is not a workspace (run `ws init` first)")
    try:
        runner = ScenarioRunner(load_script(path))
        runner.run()
    except ScriptError as err:
        raise click.ClickException(str(err))
    return runner


def _ws_append_and_run(ws: str, *lines: str) -> ScenarioRunner:
    path = _ws_script_path(ws)
    if not os.path.exists(path):
        raise click.ClickException(f"{ws} is not a workspace (run `ws init` first)")
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    candidate = text + "".join(line + "\n" for line in lines)
    try:
        runner = ScenarioRunner(parse_script(candidate))
        runner.run()
    except (ScriptError, LedgerError) as err:
        raise click.ClickException(f"step rejected: {err}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(candidate)
    return runner


@main.group()
def ws() -> None:
    """Workspace management (script-backed ledger state)."""


@ws.command("init")
@click.argument("directory", type=click.Path())
@click.option("--seed", type=int, default=0)
def ws_init(directory: str, seed: int) -> None:
    os.makedirs(directory, exist_ok=True)
    path = _ws_script_path(directory)
    if os.path.exists(path):
        raise click.ClickException(f"{directory} already holds a workspace")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"seed {seed}\nticks-per-round 1\n")
    click.echo(f"workspace ready at {directory}")


@ws.command("show")
@click.argument("directory", type=click.Path(exists=True))
def ws_show(directory: str) -> None:
    runner = _ws_load(directory)
    state = runner.net.archive.state
    click.echo(json.dumps({
        "blocks": runner.net.archive.tip.height,
        "identities": len(state.identities),
        "validators": state.validator_usernames(runner.net.tick),
        "submissions": state.book.by_status(),
        "state_hash": state.state_digest().hex(),
    }, indent=2))


@main.group()
def identity() -> None:
    """Identity registration and login against a workspace ledger."""


@identity.command("register")
@click.argument("name")
@click.option("--ws", "workspace", type=click.Path(exists=True), required=True)
def identity_register(name: str, workspace: str) -> None:
    runner = _ws_append_and_run(workspace, f"register {name}")
    kp = runner.actors[name]
    from .identity import username_for
    click.echo(f"registered {name} as {username_for(kp.public_key)}")


@identity.command("login")
@click.argument("user")
@click.argument("provider")
@click.option("--ws", "workspace", type=click.Path(exists=True), required=True)
def identity_login(user: str, provider: str, workspace: str) -> None:
    runner = _ws_append_and_run(workspace, f"login {user} {provider}")
    outcome = runner.logins[-1]
    click.echo(json.dumps(outcome))
    sys.exit(0 if outcome["ok"] else 1)


@main.group()
def poe() -> None:
    """Proof-of-existence records."""


@poe.command("record")
@click.argument("actor")
@click.argument("file", type=click.Path(exists=True))
@click.option("--chain", "chain_name", default=None)
@click.option("--ws", "workspace", type=click.Path(exists=True), required=True)
def poe_record(actor: str, file: str, chain_name: str | None, workspace: str) -> None:
    with open(file, "rb") as fh:
        data = fh.read()
    doc_name = os.path.basename(file).replace(" ", "_")
    lines = [f"store {actor} {doc_name} hex:{data.hex()}"]
    lines.append(f"poe {actor} {doc_name} {chain_name}" if chain_name
                 else f"poe {actor} {doc_name}")
    runner = _ws_append_and_run(workspace, *lines)
    state = runner.net.archive.state
    chain_id = (runner.chains.get(chain_name)
                if chain_name else max(state.poe.chains))
    record = state.poe.chains[chain_id].links[-1]
    click.echo(json.dumps({
        "chain": chain_id,
        "index": len(state.poe.chains[chain_id].links) - 1,
        "doc_hash": record.doc_hash.hex(),
        "recorded_at": record.recorded_at,
    }, indent=2))


@poe.command("verify")
@click.argument("file", type=click.Path(exists=True))
@click.option("--record", "ref", required=True, help="CHAIN:INDEX")
@click.option("--ws", "workspace", type=click.Path(exists=True), required=True)
def poe_verify(file: str, ref: str, workspace: str) -> None:
    runner = _ws_load(workspace)
    chain_id, index = (int(part) for part in ref.split(":"))
    chain = runner.net.archive.state.poe.chain(chain_id)
    if chain is None or index >= len(chain.links):
        raise click.ClickException(f"no record {ref}")
    with open(file, "rb") as fh:
        data = fh.read()
    ok = verify_existence(chain.links[index], data)
    click.echo("verified" if ok else "MISMATCH")
    sys.exit(0 if ok else 1)


@main.group()
def token() -> None:
    """Token registry operations."""


@token.command("matrix")
def token_matrix() -> None:
    """Print the feature support table for the six token standards."""
    click.echo(render_matrix())


def _token_step(workspace: str, line: str) -> None:
    runner = _ws_append_and_run(workspace, line)
    click.echo(f"ok; blocks={runner.net.archive.tip.height}")


@token.command("newclass")
@click.argument("actor")
@click.argument("fungibility", type=click.Choice(["ft", "nft", "sft"]))
@click.argument("symbol")
@click.option("--ws", "workspace", required=True, type=click.Path(exists=True))
def token_newclass(actor, fungibility, symbol, workspace) -> None:
    _token_step(workspace, f"newclass {actor} {fungibility} {symbol}")


@token.command("mint-nft")
@click.argument("actor")
@click.argument("class_id", type=int)
@click.option("--ws", "workspace", required=True, type=click.Path(exists=True))
def token_mint_nft(actor, class_id, workspace) -> None:
    _token_step(workspace, f"mint-nft {actor} {class_id}")


@token.command("mint-ft")
@click.argument("actor")
@click.argument("class_id", type=int)
@click.argument("amount", type=int)
@click.option("--ws", "workspace", required=True, type=click.Path(exists=True))
def token_mint_ft(actor, class_id, amount, workspace) -> None:
    _token_step(workspace, f"mint-ft {actor} {class_id} {amount}")


@token.command("send-nft")
@click.argument("frm")
@click.argument("to")
@click.argument("class_id", type=int)
@click.argument("instance_id", type=int)
@click.option("--ws", "workspace", required=True, type=click.Path(exists=True))
def token_send_nft(frm, to, class_id, instance_id, workspace) -> None:
    _token_step(workspace, f"send-nft {frm} {to} {class_id} {instance_id}")


@token.command("send-ft")
@click.argument("frm")
@click.argument("to")
@click.argument("class_id", type=int)
@click.argument("amount", type=int)
@click.option("--ws", "workspace", required=True, type=click.Path(exists=True))
def token_send_ft(frm, to, class_id, amount, workspace) -> None:
    _token_step(workspace, f"send-ft {frm} {to} {class_id} {amount}")


@token.command("approve")
@click.argument("owner")
@click.argument("operator")
@click.option("--class", "class_id", type=int, default=None)
@click.option("--ws", "workspace", required=True, type=click.Path(exists=True))
def token_approve(owner, operator, class_id, workspace) -> None:
    suffix = f" {class_id}" if class_id else ""
    _token_step(workspace, f"approve {owner} {operator}{suffix}")


@token.command("frac")
@click.argument("owner")
@click.argument("class_id", type=int)
@click.argument("instance_id", type=int)
@click.argument("shares", type=int)
@click.option("--ws", "workspace", required=True, type=click.Path(exists=True))
def token_frac(owner, class_id, instance_id, shares, workspace) -> None:
    _token_step(workspace, f"frac {owner} {class_id} {instance_id} {shares}")


@main.group()
def market() -> None:
    """Marketplace operations."""


@market.command("list")
@click.argument("seller")
@click.argument("class_id", type=int)
@click.argument("instance_id", type=int)
@click.argument("mode", type=click.Choice(["sale", "license"]))
@click.argument("price", type=int)
@click.option("--ws", "workspace", required=True, type=click.Path(exists=True))
def market_list(seller, class_id, instance_id, mode, price, workspace) -> None:
    runner = _ws_append_and_run(
        workspace, f"list {seller} {class_id} {instance_id} {mode} {price}")
    listing_id = max(runner.net.archive.state.market.listings)
    click.echo(f"listing {listing_id} active")


@market.command("request")
@click.argument("consumer")
@click.argument("listing_id", type=int)
@click.argument("nda_file", type=click.Path(exists=True))
@click.option("--ws", "workspace", required=True, type=click.Path(exists=True))
def market_request(consumer, listing_id, nda_file, workspace) -> None:
    with open(nda_file, "rb") as fh:
        data = fh.read()
    doc_name = "nda_" + os.path.basename(nda_file).replace(" ", "_")
    runner = _ws_append_and_run(
        workspace,
        f"store {consumer} {doc_name} hex:{data.hex()}",
        f"request {consumer} {listing_id} {doc_name}")
    agreement_id = max(runner.net.archive.state.market.agreements)
    click.echo(f"agreement {agreement_id} awaiting seller signature")


@market.command("settle")
@click.argument("seller")
@click.argument("agreement_id", type=int)
@click.option("--ws", "workspace", required=True, type=click.Path(exists=True))
def market_settle(seller, agreement_id, workspace) -> None:
    runner = _ws_append_and_run(workspace, f"settle {seller} {agreement_id}")
    agreement = runner.net.archive.state.market.agreements[agreement_id]
    click.echo(f"agreement {agreement_id} settled: {agreement.settled}")


@market.command("royalties")
@click.argument("actor")
@click.argument("agreement_id", type=int)
@click.option("--ws", "workspace", required=True, type=click.Path(exists=True))
def market_royalties(actor, agreement_id, workspace) -> None:
    runner = _ws_append_and_run(workspace, f"royalties {actor} {agreement_id}")
    distribution = runner.net.archive.state.market.distributions[agreement_id]
    click.echo(json.dumps({
        "agreement": agreement_id,
        "gross": distribution.gross,
        "payouts": [[runner.alias.get(owner, owner), amount]
                    for owner, amount in distribution.payouts],
    }, indent=2))


@market.command("portfolio")
@click.argument("owner")
@click.argument("patents", nargs=-1, required=True)
@click.option("--ws", "workspace", required=True, type=click.Path(exists=True))
def market_portfolio(owner, patents, workspace) -> None:
    runner = _ws_append_and_run(workspace, f"portfolio {owner} {' '.join(patents)}")
    key = max(runner.net.archive.state.market.portfolios)
    click.echo(f"portfolio NFT ({key[0]}, {key[1]})")


@market.command("report-dispute")
@click.argument("submission_id", type=int)
@click.option("--ws", "workspace", required=True, type=click.Path(exists=True))
def market_report_dispute(submission_id, workspace) -> None:
    """Bundle the evidence for a dispute: PoE chain, grant block, ownership."""
    runner = _ws_load(workspace)
    state = runner.net.archive.state
    sub = state.book.submissions.get(submission_id)
    if sub is None:
        raise click.ClickException(f"no submission {submission_id}")
    grant_height = None
    for block in runner.net.archive.chain:
        if any(tx.kind.value == "patent" for tx in block.txs):
            grant_height = block.height
    poe_records = []
    if sub.poe_chain_ref:
        chain = state.poe.chain(sub.poe_chain_ref)
        if chain:
            poe_records = [{
                "doc_hash": record.doc_hash.hex(),
                "prev_link": record.prev_link.hex() if record.prev_link else None,
                "recorded_at": record.recorded_at,
            } for record in chain.links]
    ownership = [entry for entry in state.tokens.history
                 if sub.minted and entry[1:3] == sub.minted]
    click.echo(json.dumps({
        "submission": submission_id,
        "status": sub.status.value,
        "applicant": runner.alias.get(sub.applicant, sub.applicant),
        "doc_cid": sub.doc_cid.text,
        "poe_chain": poe_records,
        "latest_examination_block": grant_height,
        "ownership_history": [list(map(str, entry)) for entry in ownership],
    }, indent=2))


if __name__ == "__main__":
    main()
