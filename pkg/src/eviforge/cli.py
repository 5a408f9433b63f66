"""Command-line surface for the full workflow.

Exit codes: 0 success, 2 usage, 3 validation, 4 base mismatch, 5 I/O,
6 network. Failures print one machine-readable JSON line on stderr.
"""

import functools
import json
import os
import sys

import click
import requests

from . import compose as compose_mod
from . import diffing, handlers, imgfs, inject, package, registry

ENV_REGISTRY = "EVIFORGE_REGISTRY"
ENV_CACHE = "EVIFORGE_CACHE"
ENV_REGISTRY_ROOT = "EVIFORGE_REGISTRY_ROOT"

EXIT_VALIDATION = 3
EXIT_BASE_MISMATCH = 4
EXIT_IO = 5
EXIT_NETWORK = 6


def _fail(exc: Exception, code: int) -> None:
    line = package.canonical_json(
        {"error": type(exc).__name__, "message": str(exc)}).decode()
    click.echo(line, err=True)
    sys.exit(code)


def cli_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (inject.BaseMismatch, compose_mod.ChainBroken) as exc:
            _fail(exc, EXIT_BASE_MISMATCH)
        except (package.PackageError, diffing.DiffError, compose_mod.ComposeError,
                handlers.HandlerError, imgfs.ImgFsError, inject.InjectError) as exc:
            _fail(exc, EXIT_VALIDATION)
        except (requests.RequestException, registry.RegistryError) as exc:
            _fail(exc, EXIT_NETWORK)
        except OSError as exc:
            _fail(exc, EXIT_IO)
    return wrapper


def _emit(obj, as_json: bool, human: str = "") -> None:
    if as_json:
        click.echo(package.canonical_json(obj).decode())
    elif human:
        click.echo(human)


@click.group()
def main():
    """Create, manipulate, and distribute forensic challenge evidence packages."""


# -- authoring ------------------------------------------------------------------


@main.command()
@click.option("-o", "--output", required=True, type=click.Path())
@click.option("--size-mib", default=256, show_default=True)
@click.option("--cluster-size", default=2048, show_default=True,
              help="Cluster size in bytes (power-of-two multiple of 512).")
@click.option("--label", default="EVIBASE", show_default=True)
@click.option("--populate", type=click.Path(exists=True, file_okay=False),
              help="Copy this directory tree into the fresh volume.")
@click.option("--json", "as_json", is_flag=True)
@cli_errors
def fixture(output, size_mib, cluster_size, label, populate, as_json):
    """Create a base image: MBR, one partition, fresh FAT32 volume."""
    from datetime import datetime, timezone

    total_bytes = size_mib * 1024 * 1024
    img = imgfs.create_image(output, total_bytes)
    part = imgfs.PartitionEntry(index=0, start_lba=2048,
                                sector_count=total_bytes // 512 - 2048,
                                type_code=0x0C, bootable=False)
    imgfs.write_mbr(img, [part])
    vol = imgfs.format_fixture(img, part, cluster_size=cluster_size, label=label)
    written = 0
    if populate:
        for dirpath, _dirnames, filenames in os.walk(populate):
            for name in sorted(filenames):
                host_path = os.path.join(dirpath, name)
                rel = os.path.relpath(host_path, populate).replace(os.sep, "/")
                stat = os.stat(host_path)
                mtime = datetime.fromtimestamp(stat.st_mtime, tz=timezone.utc).replace(tzinfo=None)
                with open(host_path, "rb") as fh:
                    vol.write_file("/" + rel, fh.read(),
                                   imgfs.FileMeta(mtime=mtime, ctime=mtime, atime=mtime))
                written += 1
    img.flush()
    info = {"image": output, "bytes": total_bytes, "cluster_size": vol.cluster_size,
            "total_clusters": vol.total_clusters, "free_clusters": vol.free_clusters,
            "files_written": written, "image_sha256": img.content_hash}
    img.close()
    _emit(info, as_json, f"created {output} ({size_mib} MiB, "
                         f"{info['total_clusters']} clusters, sha256 {info['image_sha256'][:12]}...)")


def _load_answer_key(path, report):
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    key = package.AnswerKey(scenario=raw.get("scenario", ""))
    by_path: dict[str, list] = {}
    for artifact in report.artifacts:
        if artifact.path:
            by_path.setdefault(imgfs.fold_path(artifact.path), []).append(artifact)
    for item in raw.get("entries", []):
        matches = by_path.get(imgfs.fold_path(item["path"]), [])
        content_bearing = [a for a in matches if a.kind not in ("file_delete", "dir_delete")]
        chosen = (content_bearing or matches)
        if not chosen:
            raise package.DanglingReference(
                f"answer key names {item['path']}, but the diff produced no such artifact")
        key.entries.append(package.AnswerKeyEntry(
            artifact_id=chosen[0].artifact_id, narrative=item.get("narrative", ""),
            pertinent=bool(item.get("pertinent", True))))
    return key


@main.command("diff")
@click.argument("base", type=click.Path(exists=True))
@click.argument("modified", type=click.Path(exists=True))
@click.option("-o", "--output", required=True, type=click.Path())
@click.option("--label", "labels", multiple=True)
@click.option("--answer-key", "answer_key_path", type=click.Path(exists=True))
@click.option("--json", "as_json", is_flag=True)
@cli_errors
def diff_cmd(base, modified, output, labels, answer_key_path, as_json):
    """Diff two images into an evidence package."""
    with imgfs.open_image(base, "ro") as base_img, \
            imgfs.open_image(modified, "ro") as mod_img:
        report = diffing.diff_images(base_img, mod_img)
    key = _load_answer_key(answer_key_path, report) if answer_key_path else None
    pkg = package.build_package(report, labels=set(labels), answer_key=key)
    package.write_package(pkg, output)
    if not pkg.artifacts:
        click.echo("note: empty diff (images are identical)", err=True)
    stats = package.package_stats(pkg)
    _emit({"package_id": pkg.package_id, "output": output, "stats": stats.to_json()},
          as_json,
          f"wrote {output}: {len(pkg.artifacts)} artifacts, "
          f"{stats.container_bytes} bytes (ratio {stats.ratio:.5f})")


@main.command()
@click.argument("pkg_path", metavar="PACKAGE", type=click.Path(exists=True))
@click.option("--strip-key", is_flag=True, help="Write a copy with an empty answer key.")
@click.option("-o", "--output", type=click.Path(),
              help="Destination for --strip-key (defaults to in-place).")
@cli_errors
def inspect(pkg_path, strip_key, output):
    """Summarize a package: stats, labels, artifact table. No blob contents."""
    pkg = package.read_package(pkg_path)
    if strip_key:
        stripped = package.strip_answer_key(pkg)
        package.write_package(stripped, output or pkg_path)
    stats = package.package_stats(pkg)
    summary = {
        "package_id": pkg.package_id,
        "created_at": pkg.created_at.strftime("%Y-%m-%dT%H:%M:%SZ"),
        "labels": sorted(pkg.labels),
        "base_image_hash": pkg.base_image_hash,
        "parent_snapshot_hash": pkg.parent_snapshot_hash,
        "snapshot_hash": pkg.snapshot_hash,
        "stats": stats.to_json(),
        "answer_key_entries": 0 if strip_key else len(pkg.answer_key.entries),
        "artifacts": [
            {"artifact_id": a.artifact_id, "kind": a.kind, "path": a.path,
             "size": a.size, "handler": a.handler,
             "extent": list(a.extent) if a.extent else None}
            for a in pkg.artifacts
        ],
    }
    # inspect always speaks canonical JSON; it is the scripting surface
    click.echo(package.canonical_json(summary).decode())


@main.command("compose")
@click.argument("inputs", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("-o", "--output", required=True, type=click.Path())
@click.option("--label", "labels", multiple=True)
@click.option("--allow-kind-conflicts", is_flag=True)
@click.option("--json", "as_json", is_flag=True)
@cli_errors
def compose_cmd(inputs, output, labels, allow_kind_conflicts, as_json):
    """Merge packages into one story-mode package (last package wins)."""
    packages = [package.read_package(p) for p in inputs]
    merged = compose_mod.compose(packages, labels=set(labels) or None,
                                 allow_kind_conflicts=allow_kind_conflicts)
    package.write_package(merged, output)
    _emit({"package_id": merged.package_id, "output": output,
           "artifacts": len(merged.artifacts)},
          as_json, f"wrote {output}: {len(merged.artifacts)} artifacts "
                   f"from {len(packages)} packages")


@main.command()
@click.argument("pkg_path", metavar="PACKAGE", type=click.Path(exists=True))
@click.option("--delta", required=True, type=int, help="Shift in signed seconds.")
@click.option("-o", "--output", type=click.Path(), help="Defaults to in-place.")
@click.option("--no-clamp", is_flag=True,
              help="Error on timestamps leaving the FAT range instead of clamping.")
@click.option("--json", "as_json", is_flag=True)
@cli_errors
def retarget(pkg_path, delta, output, no_clamp, as_json):
    """Shift artifact timestamps; rewrites handler-tagged contents too."""
    pkg = package.read_package(pkg_path)
    warnings: list[str] = []
    shifted = compose_mod.retarget_time(pkg, delta, clamp=not no_clamp,
                                        warnings=warnings)
    package.write_package(shifted, output or pkg_path)
    for note in warnings:
        click.echo(f"warning: {note}", err=True)
    _emit({"package_id": shifted.package_id, "output": output or pkg_path,
           "delta": delta, "warnings": warnings},
          as_json, f"retargeted by {delta:+d}s -> {output or pkg_path}")


# -- consumption ------------------------------------------------------------------


@main.command("inject")
@click.argument("base", type=click.Path(exists=True))
@click.argument("packages", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("-o", "--output", required=True, type=click.Path())
@click.option("--mode", type=click.Choice(["logical", "physical"]), default="physical",
              show_default=True)
@click.option("--force-base", is_flag=True,
              help="Override the base hash check (logical mode only).")
@click.option("--json", "as_json", is_flag=True)
@cli_errors
def inject_cmd(base, packages, output, mode, force_base, as_json):
    """Plant packages into a copy of BASE; multiple packages compose first."""
    pkgs = [package.read_package(p) for p in packages]
    pkg = pkgs[0] if len(pkgs) == 1 else compose_mod.compose(pkgs)
    imgfs.sparse_copy(base, output)
    try:
        with imgfs.open_image(output, "rw") as out_img:
            if mode == "logical":
                outcome = inject.inject_logical(out_img, pkg,
                                                allow_base_mismatch=force_base)
            else:
                outcome = inject.inject_physical(out_img, pkg)
    except BaseException:
        if os.path.exists(output):
            os.unlink(output)  # no output file on failure
        raise
    _emit({"output": output, "mode": outcome.mode, "applied": outcome.applied,
           "skipped": outcome.skipped, "overwrites": outcome.overwrites,
           "output_image_hash": outcome.output_image_hash},
          as_json, f"injected {sum(outcome.applied.values())} artifacts into {output} "
                   f"({mode}); sha256 {outcome.output_image_hash[:12]}...")


@main.command()
@click.argument("image", type=click.Path(exists=True))
@click.argument("pkg_path", metavar="PACKAGE", type=click.Path(exists=True))
@click.option("--mode", type=click.Choice(["logical", "physical"]), default="physical",
              show_default=True, help="Match the injection mode that built IMAGE.")
@click.option("--json", "as_json", is_flag=True)
@cli_errors
def verify(image, pkg_path, mode, as_json):
    """Check that every artifact in PACKAGE is present and intact in IMAGE."""
    pkg = package.read_package(pkg_path)
    with imgfs.open_image(image, "ro") as img:
        report = inject.verify_injection(img, pkg, mode=mode)
    passed = sum(1 for c in report.checks if c.passed)
    _emit(report.to_json(), as_json,
          f"{passed}/{len(report.checks)} artifacts verified")
    if not as_json:
        for check in report.failed:
            click.echo(f"FAIL {check.kind} {check.subject}: {'; '.join(check.problems)}")
    if not report.all_passed:
        sys.exit(EXIT_VALIDATION)


@main.command()
@click.argument("snapshots", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("-o", "--output-dir", required=True, type=click.Path())
@click.option("--label", "labels", multiple=True)
@click.option("--json", "as_json", is_flag=True)
@cli_errors
def chain(snapshots, output_dir, labels, as_json):
    """Diff consecutive snapshot images s0 s1 ... into an incremental chain."""
    images = [imgfs.open_image(s, "ro") for s in snapshots]
    try:
        built = compose_mod.build_chain(images, labels=set(labels) or None)
    finally:
        for img in images:
            img.close()
    os.makedirs(output_dir, exist_ok=True)
    manifest = {"base_hash": built.base_hash, "packages": []}
    for i, pkg in enumerate(built.packages, start=1):
        name = f"{i:04d}.evpkg"
        package.write_package(pkg, os.path.join(output_dir, name))
        manifest["packages"].append({
            "file": name, "package_id": pkg.package_id,
            "parent_snapshot_hash": pkg.parent_snapshot_hash,
            "snapshot_hash": pkg.snapshot_hash,
        })
    with open(os.path.join(output_dir, "chain.json"), "w", encoding="utf-8") as fh:
        fh.write(package.canonical_json(manifest).decode())
    _emit(manifest, as_json,
          f"wrote {len(built.packages)} chain packages to {output_dir}")


def _load_chain(chain_dir):
    with open(os.path.join(chain_dir, "chain.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    packages = [package.read_package(os.path.join(chain_dir, item["file"]))
                for item in manifest["packages"]]
    return compose_mod.SnapshotChain.from_packages(manifest["base_hash"], packages)


@main.command()
@click.argument("base", type=click.Path(exists=True))
@click.argument("chain_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--upto", "k", required=True, type=int)
@click.option("-o", "--output", required=True, type=click.Path())
@click.option("--json", "as_json", is_flag=True)
@cli_errors
def reconstruct(base, chain_dir, k, output, as_json):
    """Rebuild snapshot K by injecting the first K chain packages into BASE."""
    loaded = _load_chain(chain_dir)
    with imgfs.open_image(base, "ro") as base_img:
        out = compose_mod.reconstruct(base_img, loaded, k, output)
    digest = out.content_hash
    out.close()
    _emit({"output": output, "upto": k, "image_sha256": digest},
          as_json, f"reconstructed snapshot {k} -> {output} (sha256 {digest[:12]}...)")


# -- registry ---------------------------------------------------------------------


def _client(url, cache):
    url = url or os.environ.get(ENV_REGISTRY, "")
    if not url:
        raise click.UsageError(f"no registry URL (pass --to/--from or set {ENV_REGISTRY})")
    cache = cache or os.environ.get(ENV_CACHE) or None
    return registry.RegistryClient(url, cache_dir=cache)


@main.command()
@click.argument("pkg_path", metavar="PACKAGE", type=click.Path(exists=True))
@click.option("--to", "url", help=f"Registry URL (default ${ENV_REGISTRY}).")
@click.option("--cache", type=click.Path(), help=f"Blob cache dir (default ${ENV_CACHE}).")
@click.option("--json", "as_json", is_flag=True)
@cli_errors
def publish(pkg_path, url, cache, as_json):
    """Upload a package; the server stores only blobs it lacks."""
    client = _client(url, cache)
    receipt = client.publish_file(pkg_path)
    _emit(receipt, as_json,
          f"published {receipt['package_id']}: {receipt['blobs_stored']} blobs stored, "
          f"{receipt['blobs_deduplicated']} deduplicated")


@main.command()
@click.argument("package_id")
@click.option("--from", "url", help=f"Registry URL (default ${ENV_REGISTRY}).")
@click.option("-o", "--output", required=True, type=click.Path())
@click.option("--cache", type=click.Path(), help=f"Blob cache dir (default ${ENV_CACHE}).")
@click.option("--json", "as_json", is_flag=True)
@cli_errors
def fetch(package_id, url, output, cache, as_json):
    """Download a package, negotiating away blobs already in the local cache."""
    client = _client(url, cache)
    result = client.fetch_to_file(package_id, output)
    _emit({"output": output, "bytes": len(result.data),
           "transferred_bytes": result.transferred_bytes,
           "blobs_from_cache": result.blobs_from_cache},
          as_json, f"fetched {package_id} -> {output} "
                   f"({result.transferred_bytes}/{len(result.data)} bytes on the wire)")


@main.command()
@click.option("--addr", default="127.0.0.1:8700", show_default=True)
@click.option("--root", type=click.Path(),
              help=f"Storage root (default ${ENV_REGISTRY_ROOT} or ./registry-root).")
@cli_errors
def serve(addr, root):
    """Run the registry server (blocks until interrupted)."""
    root = root or os.environ.get(ENV_REGISTRY_ROOT) or "./registry-root"
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise click.UsageError(f"--addr must be host:port, got {addr!r}")
    click.echo(f"serving registry root {root} on {addr}", err=True)
    registry.serve_forever(root, host, int(port))


if __name__ == "__main__":
    main()
