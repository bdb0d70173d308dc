"""Three blind writers on key pairs (A,B), (B,C), (C,A), one key per server.

Every delivery order is explored. With the token order check on, no schedule
commits a cycle; with it off the search finds one and prints its trace.

    python3 demos/cycle_search.py
"""

from chainkv.harness.search import cycle_scenario, interleaving_search


def main():
    ok = interleaving_search(cycle_scenario(f=0))
    print(f"order check on : {ok.schedules} end states, exhaustive={ok.exhaustive}, "
          f"all three committed in {ok.committed_all}")
    bad = interleaving_search(cycle_scenario(f=0, order_check=False), keep_going=True)
    print(f"order check off: {bad.found} failing end states; first: {bad.reason}")
    for link in bad.trace:
        print("   deliver", " -> ".join(link))


if __name__ == "__main__":
    main()
