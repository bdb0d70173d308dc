"""Client API tour on a simulated six-server cluster.

    python3 demos/quickstart.py
"""

from chainkv.core import Add, ListAppend, Overwrite, SchemaKey
from chainkv.harness.cluster import SimCluster


def key(name):
    return SchemaKey("default", name.encode())


def main():
    cluster = SimCluster(n_servers=6, f=1, seed=1)
    alice = cluster.add_client("alice")
    bob = cluster.add_client("bob")

    async def story():
        # a transaction: optimistic reads, buffered writes, one commit
        ctx = alice.begin()
        ctx.put(key("balance"), Overwrite(100))
        ctx.put(key("log"), ListAppend("opened"))
        print("open account:", await ctx.commit())

        # atomic increments from two clients never conflict with each other
        a = alice.begin()
        b = bob.begin()
        a.put(key("balance"), Add(-30))
        b.put(key("balance"), Add(5))
        print("concurrent adds:", await a.commit(), await b.commit())
        print("balance now:", await bob.get(key("balance")))

        # a stale read aborts: bob overwrites the key alice read
        ctx = alice.begin()
        seen = await ctx.get(key("balance"))
        await bob.put(key("balance"), Overwrite(0))
        ctx.put(key("balance"), Overwrite(seen + 1))
        print("stale read-modify-write:", await ctx.commit())

        # nested transactions merge into their parent
        root = alice.begin()
        child = root.begin_nested()
        child.put(key("log"), ListAppend("nested"))
        child.commit_nested()
        print("nested merge:", await root.commit(), await alice.get(key("log")))

    task = cluster.spawn(story())
    cluster.run(stop=lambda: task.done)
    task.result()
    print("invariant violations:", cluster.check_invariants())


if __name__ == "__main__":
    main()
