import itertools
import random

from pigpaxos.core import Ballot, Command, EntryState, NOOP, Op
from pigpaxos.engine import (AcceptedEntry, Broadcast, ClientReply, Engine, P1a, P1b, P2a, P2b,
                             P3, ReplyStatus, Role, ToClient, merge_accepted)


def put(i, key=b"k"):
    return Command(Op.PUT, key, b"v%d" % i, client_id=1, request_seq=i)


def leader(n=5):
    return Engine(0, n, bootstrap_leader=0)


def broadcasts(eng):
    return [e.msg for e in eng.take() if isinstance(e, Broadcast)]


def commit_all(eng, slot, voters):
    for v in voters:
        eng.on_vote(slot, v, eng.ballot)


def test_first_request_takes_slot_zero():
    eng = leader()
    eng.on_client_request(put(1), 0.0)
    (msg,) = broadcasts(eng)
    assert isinstance(msg, P2a) and msg.slot == 0 and msg.commit_up_to == -1
    assert eng.entry(0).voters == {0}


def test_next_free_slot_carries_watermark():
    eng = leader()
    for i in range(5):
        eng.on_client_request(put(i + 1), 0.0)
        commit_all(eng, i, [1, 2])
    eng.take()
    eng.on_client_request(put(6), 0.0)
    (msg,) = broadcasts(eng)
    assert msg.slot == 5 and msg.commit_up_to == 4


def test_duplicate_request_answered_from_cache():
    eng = leader()
    eng.on_client_request(put(1), 0.0)
    commit_all(eng, 0, [1, 2])
    eng.take()
    eng.on_client_request(put(1), 0.0)
    (eff,) = eng.take()
    assert isinstance(eff, ToClient) and eff.reply.status is ReplyStatus.OK
    assert eng.next_slot == 1


def test_pending_duplicate_not_reproposed():
    eng = leader()
    eng.on_client_request(put(1), 0.0)
    eng.take()
    eng.on_client_request(put(1), 0.0)
    assert eng.take() == []


def test_follower_without_leader_starts_election():
    eng = Engine(2, 5)
    eng.ballot = Ballot(4, 1)
    eng.last_contact = -100.0
    eng.on_client_request(put(1), 0.0)
    (msg,) = broadcasts(eng)
    assert isinstance(msg, P1a) and msg.ballot == Ballot(5, 2)
    assert eng.role is Role.CANDIDATE


def test_follower_with_live_leader_redirects():
    eng = Engine(2, 5, bootstrap_leader=0)
    eng.on_client_request(put(1), 0.0)
    (eff,) = eng.take()
    assert eff.reply.status is ReplyStatus.NOT_LEADER and eff.reply.leader_hint == 0


def test_p1a_on_fresh_node():
    eng = Engine(3, 5)
    reply = eng.on_p1a(P1a(Ballot(1, 2)), 0.0)
    assert reply == P1b(Ballot(1, 2), 3, ())


def test_p1a_with_lower_ballot_rejected():
    eng = Engine(3, 5)
    eng.ballot = Ballot(3, 1)
    reply = eng.on_p1a(P1a(Ballot(2, 4)), 0.0)
    assert reply.ballot == Ballot(3, 1)
    assert eng.ballot == Ballot(3, 1)


def test_p1a_reports_uncommitted_entries():
    eng = Engine(3, 5)
    cmd = put(9)
    eng.on_p2a(P2a(Ballot(2, 0), 7, cmd), 0.0)
    reply = eng.on_p1a(P1a(Ballot(3, 1)), 0.0)
    assert reply.accepted == (AcceptedEntry(7, Ballot(2, 0), cmd),)


def candidate(n=5, node=0):
    eng = Engine(node, n)
    eng.start_election(0.0)
    eng.take()
    return eng


def test_p1b_quorum_elects():
    eng = candidate()
    eng.on_p1b(P1b(eng.ballot, 1), 0.0)
    assert eng.role is Role.CANDIDATE
    eng.on_p1b(P1b(eng.ballot, 2), 0.0)
    assert eng.role is Role.LEADER


def test_p1b_reproposes_highest_ballot_value():
    eng = candidate()
    old, new = put(1), put(2)
    eng.on_p1b(P1b(eng.ballot, 1, (AcceptedEntry(4, Ballot(1, 0), old),)), 0.0)
    eng.on_p1b(P1b(eng.ballot, 2, (AcceptedEntry(4, Ballot(2, 3), new),)), 0.0)
    assert eng.is_leader
    msgs = {m.slot: m.command for m in broadcasts(eng)}
    assert msgs[4] == new
    # holes below a reported slot are filled with no-ops
    assert all(msgs[s] == NOOP for s in range(4))


def test_p1b_rejection_aborts():
    eng = candidate()
    eng.on_p1b(P1b(eng.ballot, 1), 0.0)
    eng.on_p1b(P1b(Ballot(9, 4), 2), 0.0)
    assert eng.role is Role.FOLLOWER and eng.ballot == Ballot(9, 4)
    eng.on_p1b(P1b(Ballot(1, 0), 3), 0.0)
    assert eng.role is Role.FOLLOWER


def test_merge_accepted_prefers_committed_then_ballot():
    a = AcceptedEntry(1, Ballot(5, 0), put(1))
    b = AcceptedEntry(1, Ballot(2, 0), put(2), committed=True)
    assert merge_accepted(a, b) == b
    c = AcceptedEntry(1, Ballot(6, 0), put(3))
    assert merge_accepted(a, c) == c
    assert merge_accepted(None, a) == a


def test_p2a_accepts_current_ballot():
    eng = Engine(1, 5, bootstrap_leader=0)
    reply = eng.on_p2a(P2a(Ballot(1, 0), 3, put(1)), 0.0)
    assert reply == P2b(Ballot(1, 0), 3, 1)


def test_p2a_stale_ballot_rejected():
    eng = Engine(1, 5)
    eng.ballot = Ballot(2, 1)
    reply = eng.on_p2a(P2a(Ballot(1, 0), 3, put(1)), 0.0)
    assert reply.reject_ballot == Ballot(2, 1)
    assert eng.entry(3) is None


def test_p2a_watermark_commits_and_executes_in_order():
    eng = Engine(1, 5, bootstrap_leader=0)
    b = Ballot(1, 0)
    for s in range(5):
        eng.on_p2a(P2a(b, s, put(s + 1)), 0.0)
    assert eng.commit_index == -1
    eng.on_p2a(P2a(b, 5, put(6), commit_up_to=4), 0.0)
    assert eng.commit_index == 4
    assert [eng.entry(s).state for s in range(6)] == [EntryState.EXECUTED] * 5 + [
        EntryState.ACCEPTED]
    assert eng.executed_log() == [put(s + 1) for s in range(5)]


def test_vote_reaches_quorum_once():
    eng = leader()
    eng.on_client_request(put(1), 0.0)
    assert not eng.on_vote(0, 1, eng.ballot)
    assert not eng.on_vote(0, 1, eng.ballot)
    assert eng.entry(0).voters == {0, 1}
    assert eng.on_vote(0, 2, eng.ballot)
    assert not eng.on_vote(0, 3, eng.ballot)
    assert eng.entry(0).state >= EntryState.COMMITTED


def test_stale_and_unknown_votes_dropped():
    eng = leader()
    eng.on_client_request(put(1), 0.0)
    eng.on_vote(0, 1, Ballot(0, 3))
    eng.on_vote(42, 1, eng.ballot)
    assert eng.dropped_votes == 2
    assert eng.entry(0).voters == {0}


def test_reject_makes_leader_step_down_and_redirect():
    eng = leader()
    eng.on_client_request(put(1), 0.0)
    eng.take()
    eng.on_p2b(P2b(eng.ballot, 0, 3, reject_ballot=Ballot(4, 3)), 0.0)
    assert eng.role is Role.FOLLOWER
    replies = [e.reply for e in eng.take() if isinstance(e, ToClient)]
    assert replies == [ClientReply(1, 1, ReplyStatus.NOT_LEADER, leader_hint=3)]


def test_p3_commits_slot():
    eng = Engine(2, 3, bootstrap_leader=0)
    eng.on_p3(P3(0, put(1)), 0, 0.0)
    assert eng.commit_index == 0 and eng.kv.get(b"k") == b"v1"


def test_election_timeout_fires_tick():
    eng = Engine(1, 3, bootstrap_leader=0)
    eng.tick(0.1)
    assert eng.role is Role.FOLLOWER
    eng.tick(10.0)
    assert eng.role is Role.CANDIDATE


def _campaign(acceptors, node, ballot_round, quorum, fresh):
    """Run phase 1 for ``node`` over ``quorum``; return its slot-0 proposal."""
    me = acceptors[node]
    me.ballot = max(me.ballot, Ballot(ballot_round - 1, node))
    me.role = Role.FOLLOWER
    me.start_election(0.0)
    me.take()
    for i in quorum:
        if i != node:
            me.on_p1b(acceptors[i].on_p1a(P1a(me.ballot), 0.0), 0.0)
    assert me.is_leader
    proposals = {m.slot: m for m in broadcasts(me)}
    if 0 in proposals:
        return proposals[0]
    me.on_client_request(fresh, 0.0)
    (msg,) = broadcasts(me)
    return msg


def test_recovery_exhaustive_three_nodes():
    """Once a majority accepts a value, every later phase 1 recovers it.

    Two proposers in turn run phase 1 over any majority and reach any subset
    of acceptors with their phase 2; a third then runs phase 1 over any
    majority. Every schedule is enumerated.
    """
    nodes = range(3)
    subsets = [s for k in range(4) for s in itertools.combinations(nodes, k)]
    majorities = [s for s in subsets if len(s) >= 2]
    cases = 0
    for q1, s1, q2, s2, q3 in itertools.product(majorities, subsets, majorities, subsets,
                                                majorities):
        if 0 not in q1 or 1 not in q2 or 2 not in q3:
            continue
        acc = [Engine(i, 3) for i in nodes]
        chosen = None
        for proposer, rnd, quorum, reach in ((0, 1, q1, s1), (1, 2, q2, s2)):
            msg = _campaign(acc, proposer, rnd, quorum, put(proposer + 1, b"x"))
            accepted = [i for i in reach if not acc[i].on_p2a(msg, 0.0).reject_ballot]
            if len(accepted) >= 2:
                assert chosen in (None, msg.command)
                chosen = msg.command
        final = _campaign(acc, 2, 3, q3, put(9, b"x"))
        if chosen is not None:
            assert final.command == chosen, (q1, s1, q2, s2, q3)
        cases += 1
    assert cases > 100


def test_random_message_orders_single_value():
    """Two competing leaders with random delivery never commit different values."""
    for seed in range(200):
        rng = random.Random(seed)
        nodes = [Engine(i, 3) for i in range(3)]
        chosen = {}
        msgs = []
        for proposer, val in ((0, put(1)), (1, put(2))):
            nodes[proposer].start_election(0.0)
            nodes[proposer].on_client_request(val, 0.0)
        for i in range(2):
            for eff in nodes[i].take():
                if isinstance(eff, Broadcast):
                    msgs.extend((i, j, eff.msg) for j in range(3) if j != i)
        steps = 0
        while msgs and steps < 500:
            steps += 1
            src, dst, msg = msgs.pop(rng.randrange(len(msgs)))
            eng = nodes[dst]
            if isinstance(msg, P1a):
                msgs.append((dst, src, eng.on_p1a(msg, 0.0)))
            elif isinstance(msg, P2a):
                msgs.append((dst, src, eng.on_p2a(msg, 0.0)))
            elif isinstance(msg, P1b):
                eng.on_p1b(msg, 0.0)
            elif isinstance(msg, P2b):
                eng.on_p2b(msg, 0.0)
            for eff in eng.take():
                if isinstance(eff, Broadcast):
                    msgs.extend((dst, j, eff.msg) for j in range(3) if j != dst)
            for node in nodes:
                for s in range(node.commit_index + 1):
                    cmd = node.entry(s).command
                    assert chosen.setdefault(s, cmd) == cmd, seed
